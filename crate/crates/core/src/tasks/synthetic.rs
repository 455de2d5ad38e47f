use rand::Rng;
use rand_distr::StandardNormal;

use crate::{rng, Error, Result};

use super::{ClassData, FamilyKind, Split, TaskFamily};

pub const GLYPH_SIDE: usize = 14;

fn split_of(i: usize, train: usize, val: usize) -> Split {
    if i < train {
        Split::Train
    } else if i < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

fn check_counts(what: &str, train: usize, val: usize, test: usize, samples: usize) -> Result<()> {
    if train == 0 || val == 0 || test == 0 || samples == 0 {
        return Err(Error::Config(format!(
            "{what}: class counts and samples per class must be positive (got {train}/{val}/{test}, {samples})"
        )));
    }
    Ok(())
}

/// Isotropic Gaussian classes around prototypes drawn from `N(0, spread²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobsSpec {
    pub dim: usize,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub samples_per_class: usize,
    pub spread: f64,
    pub noise: f64,
}

impl Default for BlobsSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            train_classes: 40,
            val_classes: 12,
            test_classes: 12,
            samples_per_class: 40,
            spread: 1.0,
            noise: 0.5,
        }
    }
}

impl BlobsSpec {
    pub fn build(&self, seed: u64) -> Result<TaskFamily> {
        check_counts(
            "gaussian_blobs",
            self.train_classes,
            self.val_classes,
            self.test_classes,
            self.samples_per_class,
        )?;
        if self.dim == 0 || !(self.spread >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config(format!("gaussian_blobs: invalid generation parameters {self:?}")));
        }
        let total = self.train_classes + self.val_classes + self.test_classes;
        let classes = (0..total)
            .map(|i| {
                let mut prng = rng::stream(seed, "blobs/prototype", i as u64);
                let proto: Vec<f64> = (0..self.dim)
                    .map(|_| self.spread * prng.sample::<f64, _>(StandardNormal))
                    .collect();
                let mut srng = rng::stream(seed, "blobs/samples", i as u64);
                let samples = (0..self.samples_per_class)
                    .map(|_| {
                        proto
                            .iter()
                            .map(|p| p + self.noise * srng.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect();
                ClassData {
                    id: format!("blob{i:04}"),
                    split: split_of(i, self.train_classes, self.val_classes),
                    samples,
                }
            })
            .collect();
        Ok(TaskFamily {
            kind: FamilyKind::GaussianBlobs,
            origin: FamilyKind::GaussianBlobs.as_str().to_string(),
            seed,
            sample_shape: vec![self.dim],
            classes,
        })
    }
}

/// Binary 14×14 glyphs. Each class owns a fixed set of straight strokes;
/// each sample shifts the whole glyph by up to `jitter` pixels and flips
/// every pixel independently with probability `flip_prob`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphsSpec {
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub samples_per_class: usize,
    pub strokes_per_class: usize,
    pub jitter: i64,
    pub flip_prob: f64,
}

impl Default for GlyphsSpec {
    fn default() -> Self {
        Self {
            train_classes: 40,
            val_classes: 12,
            test_classes: 12,
            samples_per_class: 30,
            strokes_per_class: 3,
            jitter: 1,
            flip_prob: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Stroke {
    row: i64,
    col: i64,
    dr: i64,
    dc: i64,
    len: i64,
}

const DIRECTIONS: [(i64, i64); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];

impl GlyphsSpec {
    pub fn build(&self, seed: u64) -> Result<TaskFamily> {
        check_counts(
            "pattern_glyphs",
            self.train_classes,
            self.val_classes,
            self.test_classes,
            self.samples_per_class,
        )?;
        if self.strokes_per_class == 0 || self.jitter < 0 || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("pattern_glyphs: invalid generation parameters {self:?}")));
        }
        let side = GLYPH_SIDE as i64;
        let total = self.train_classes + self.val_classes + self.test_classes;
        let classes = (0..total)
            .map(|i| {
                let mut crng = rng::stream(seed, "glyphs/strokes", i as u64);
                let strokes: Vec<Stroke> = (0..self.strokes_per_class)
                    .map(|_| {
                        let (dr, dc) = DIRECTIONS[crng.random_range(0..DIRECTIONS.len())];
                        Stroke {
                            row: crng.random_range(2..side - 2),
                            col: crng.random_range(2..side - 2),
                            dr,
                            dc,
                            len: crng.random_range(4..=8),
                        }
                    })
                    .collect();
                let mut srng = rng::stream(seed, "glyphs/samples", i as u64);
                let samples = (0..self.samples_per_class)
                    .map(|_| {
                        let oy = srng.random_range(-self.jitter..=self.jitter);
                        let ox = srng.random_range(-self.jitter..=self.jitter);
                        let mut img = vec![0.0; GLYPH_SIDE * GLYPH_SIDE];
                        for s in &strokes {
                            for t in 0..s.len {
                                let r = s.row + oy + t * s.dr;
                                let c = s.col + ox + t * s.dc;
                                if (0..side).contains(&r) && (0..side).contains(&c) {
                                    img[(r * side + c) as usize] = 1.0;
                                }
                            }
                        }
                        for px in img.iter_mut() {
                            if srng.random_bool(self.flip_prob) {
                                *px = 1.0 - *px;
                            }
                        }
                        img
                    })
                    .collect();
                ClassData {
                    id: format!("glyph{i:04}"),
                    split: split_of(i, self.train_classes, self.val_classes),
                    samples,
                }
            })
            .collect();
        Ok(TaskFamily {
            kind: FamilyKind::PatternGlyphs,
            origin: FamilyKind::PatternGlyphs.as_str().to_string(),
            seed,
            sample_shape: vec![1, GLYPH_SIDE, GLYPH_SIDE],
            classes,
        })
    }
}
