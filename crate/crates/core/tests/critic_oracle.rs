use metacritic::networks::{critic_forward, estimate_critic_memory, pad_for_layer, CriticSpec};
use metacritic::{ParamSet, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

/// Direct loop evaluation of the critic from its parameter arrays.
fn brute_force(spec: &CriticSpec, w: &ParamSet, f: &[f64]) -> f64 {
    let len = f.len();
    let k = spec.kernels_per_layer;
    let mut channels: Vec<Vec<f64>> = vec![f.to_vec()];
    for layer in 0..spec.num_conv_layers {
        let d = 1usize << layer;
        let left = d / 2;
        let weight = w.get(&format!("conv{layer}.weight")).unwrap().data();
        let bias = w.get(&format!("conv{layer}.bias")).unwrap().data();
        let cin = channels.len();
        let mut outs = Vec::new();
        for o in 0..k {
            let mut out = vec![0.0; len];
            for (t, slot) in out.iter_mut().enumerate() {
                let mut acc = bias[o];
                for (c, ch) in channels.iter().enumerate() {
                    for tap in 0..2 {
                        let pos = (t + tap * d) as isize - left as isize;
                        if pos >= 0 && (pos as usize) < len {
                            acc += weight[(o * cin + c) * 2 + tap] * ch[pos as usize];
                        }
                    }
                }
                *slot = acc.max(0.0);
            }
            outs.push(out);
        }
        channels.extend(outs);
    }
    let head: Vec<f64> = channels.concat();
    let dim = head.len();
    let w1 = w.get("fc1.weight").unwrap().data();
    let b1 = w.get("fc1.bias").unwrap().data();
    let w2 = w.get("fc2.weight").unwrap().data();
    let b2 = w.get("fc2.bias").unwrap().data();
    let mut out = b2[0];
    for j in 0..dim {
        let mut h = b1[j];
        for (i, x) in head.iter().enumerate() {
            h += x * w1[i * dim + j];
        }
        out += h.max(0.0) * w2[j];
    }
    out
}

fn features(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0.0..1.0)).collect()
}

#[test]
fn forward_matches_loop_oracle_at_length_four() {
    let spec = CriticSpec::new(4);
    for seed in 0..4 {
        let w = spec.init_params(seed).unwrap();
        let f = features(4, 50 + seed);
        let got = critic_forward(&spec, &w, &Tensor::constant(&[1, 4], f.clone()).unwrap())
            .unwrap()
            .item()
            .unwrap();
        let want = brute_force(&spec, &w, &f);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn padding_solutions() {
    let table: Vec<_> = (0..5).map(|i| pad_for_layer(i).unwrap()).collect();
    assert_eq!(table, [(0, 1), (1, 1), (2, 2), (4, 4), (8, 8)]);
}

#[test]
fn memory_estimate_is_quadratic() {
    for p in [1u64, 37, 1000, 70_000] {
        assert_eq!(
            estimate_critic_memory(2 * p, 4).unwrap(),
            4 * estimate_critic_memory(p, 4).unwrap()
        );
    }
    let tb = estimate_critic_memory(70_000, 4).unwrap() as f64 / 1e12;
    assert!((tb - 32.0).abs() / 32.0 < 0.05, "{tb} TB");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_layer_preserves_length(len in 1usize..300) {
        let spec = CriticSpec::new(len);
        let shapes = spec.shapes().unwrap();
        prop_assert_eq!(&shapes.conv_out_lens, &vec![len; 5]);
        prop_assert_eq!(&shapes.conv_in_channels, &vec![1, 9, 17, 25, 33]);
        prop_assert_eq!(shapes.fc_in_dim, 41 * len);
    }

    #[test]
    fn oracle_agrees_for_small_lengths(len in 1usize..9, seed in 0u64..1000) {
        let spec = CriticSpec::with_width(len, 3);
        let w = spec.init_params(seed).unwrap();
        let f = features(len, seed ^ 0x55);
        let got = critic_forward(&spec, &w, &Tensor::constant(&[1, len], f.clone()).unwrap()).unwrap().item().unwrap();
        let want = brute_force(&spec, &w, &f);
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}
