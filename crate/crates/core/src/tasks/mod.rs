//! Few-shot episode generation.
//!
//! A [`TaskFamily`] holds a finite pool of samples for every class, with
//! each class assigned to exactly one meta-split. Episodes are drawn from a
//! split's class pool by a random stream keyed on `(family seed, split,
//! episode index)`, so any episode can be regenerated in isolation.

mod corpus;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};

use crate::autodiff::Tensor;
use crate::{rng, Error, Result};

pub use corpus::{CORPUS_MAGIC, CORPUS_VERSION};
pub use synthetic::{BlobsSpec, GlyphsSpec, GLYPH_SIDE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub(crate) fn as_byte(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.get(b as usize).copied()
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Unknown {
                kind: "split",
                value: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FamilyKind {
    GaussianBlobs,
    PatternGlyphs,
    FileCorpus,
}

impl FamilyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FamilyKind::GaussianBlobs => "gaussian_blobs",
            FamilyKind::PatternGlyphs => "pattern_glyphs",
            FamilyKind::FileCorpus => "file_corpus",
        }
    }
}

impl FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blobs" => Ok(FamilyKind::GaussianBlobs),
            "pattern_glyphs" => Ok(FamilyKind::PatternGlyphs),
            "file_corpus" => Ok(FamilyKind::FileCorpus),
            other => Err(Error::Unknown {
                kind: "task family",
                value: other.to_string(),
            }),
        }
    }
}

/// Samples of one class, each a flat vector of `product(sample_shape)` values.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassData {
    pub id: String,
    pub split: Split,
    pub samples: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskFamily {
    pub kind: FamilyKind,
    /// Kind the samples were generated by; differs from `kind` for loaded corpora.
    pub origin: String,
    pub seed: u64,
    pub sample_shape: Vec<usize>,
    pub classes: Vec<ClassData>,
}

/// Inputs with episode-local labels `0..way`.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub task_id: String,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    /// Class id behind each episode label.
    pub classes: Vec<String>,
    pub support: LabeledSet,
    pub target: LabeledSet,
}

impl TaskFamily {
    pub fn pool(&self, split: Split) -> Vec<&ClassData> {
        self.classes.iter().filter(|c| c.split == split).collect()
    }

    pub fn pool_size(&self, split: Split) -> usize {
        self.classes.iter().filter(|c| c.split == split).count()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Smallest per-class sample count in `split`.
    pub fn min_samples(&self, split: Split) -> usize {
        self.pool(split).iter().map(|c| c.samples.len()).min().unwrap_or(0)
    }

    /// Reject episode shapes this family cannot serve in `split`.
    pub fn check_episode_shape(&self, split: Split, way: usize, shot: usize, query: usize) -> Result<()> {
        if way == 0 || shot == 0 || query == 0 {
            return Err(Error::Task(format!(
                "way, shot and query must be positive (got {way}/{shot}/{query})"
            )));
        }
        let pool = self.pool_size(split);
        if way > pool {
            return Err(Error::Task(format!("way {way} exceeds the {pool}-class {split} pool")));
        }
        let have = self.min_samples(split);
        if shot + query > have {
            return Err(Error::Task(format!(
                "shot + query = {} exceeds the {have} samples available per {split} class",
                shot + query
            )));
        }
        Ok(())
    }

    pub fn sample_episode(&self, split: Split, index: u64, way: usize, shot: usize, query: usize) -> Result<Episode> {
        self.check_episode_shape(split, way, shot, query)?;
        let mut rng = rng::stream(self.seed, &format!("episode/{split}"), index);
        let pool = self.pool(split);
        // choose_multiple returns the classes in random order, which is
        // the class-to-label assignment.
        let chosen: Vec<&ClassData> = pool.choose_multiple(&mut rng, way).copied().collect();
        let d = self.sample_len();
        let mut xs = Vec::with_capacity(way * shot * d);
        let mut xt = Vec::with_capacity(way * query * d);
        let mut ys = Vec::with_capacity(way * shot);
        let mut yt = Vec::with_capacity(way * query);
        for (label, class) in chosen.iter().enumerate() {
            let mut order: Vec<usize> = (0..class.samples.len()).collect();
            order.shuffle(&mut rng);
            for &i in &order[..shot] {
                xs.extend_from_slice(&class.samples[i]);
                ys.push(label);
            }
            for &i in &order[shot..shot + query] {
                xt.extend_from_slice(&class.samples[i]);
                yt.push(label);
            }
        }
        let shape = |n: usize| {
            let mut s = vec![n];
            s.extend_from_slice(&self.sample_shape);
            s
        };
        Ok(Episode {
            task_id: format!("{split}-{index}"),
            way,
            shot,
            query,
            classes: chosen.iter().map(|c| c.id.clone()).collect(),
            support: LabeledSet {
                x: Tensor::constant(&shape(way * shot), xs)?,
                y: ys,
            },
            target: LabeledSet {
                x: Tensor::constant(&shape(way * query), xt)?,
                y: yt,
            },
        })
    }
}
