use metacritic::autodiff::functional::{conv1d, nll_loss};
use metacritic::autodiff::{backward, finite_difference_check, graph_is_acyclic, grad, Conv1dAttrs};
use metacritic::{ParamSet, Partition, Tensor};
use proptest::prelude::*;

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, seed in vals(35)) {
        let x = Tensor::constant(&[rows, cols], seed[..rows * cols].to_vec()).unwrap();
        let s = x.scale(10.0).softmax().unwrap();
        for r in 0..rows {
            let total: f64 = s.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn recorded_graphs_are_acyclic(a in vals(6), b in vals(6)) {
        let x = Tensor::var(&[2, 3], a).unwrap();
        let y = Tensor::var(&[3, 2], b).unwrap();
        let z = x.matmul(&y).unwrap().relu().softmax().unwrap();
        let loss = nll_loss(&z, &[0, 1]).unwrap();
        prop_assert!(graph_is_acyclic(&loss));
        // Second-order graphs too.
        let g = grad(&loss, &[x.clone()], true).unwrap().remove(0);
        prop_assert!(graph_is_acyclic(&g.mul(&g).unwrap().sum()));
    }

    #[test]
    fn gradient_shapes_match_parameters(r in 1usize..4, c in 1usize..4, data in vals(16)) {
        let mut p = ParamSet::new();
        p.push("w", Tensor::var(&[r, c], data[..r * c].to_vec()).unwrap(), Partition::Adapted).unwrap();
        p.push("unused", Tensor::var(&[c], data[..c].to_vec()).unwrap(), Partition::Shared).unwrap();
        let loss = p.get("w").unwrap().sigmoid().sum();
        let g = backward(&loss, &p, false).unwrap();
        prop_assert_eq!(g.get("w").unwrap().shape(), &[r, c][..]);
        prop_assert!(g.get_or_zeros("unused", &[c]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_gradient_agrees_with_differences(a in vals(6), b in vals(6)) {
        let mut p = ParamSet::new();
        p.push("a", Tensor::constant(&[2, 3], a).unwrap(), Partition::Adapted).unwrap();
        p.push("b", Tensor::constant(&[3, 2], b).unwrap(), Partition::Adapted).unwrap();
        let rep = finite_difference_check(
            |q| Ok(q.get("a")?.matmul(q.get("b")?)?.sigmoid().sum()),
            &p,
            1e-5,
        )
        .unwrap();
        // Random inputs can cancel a coordinate to ~0, where only the
        // absolute error is meaningful.
        for row in &rep.rows {
            prop_assert!(row.max_rel_err <= 1e-6 || row.max_abs_err <= 1e-10, "{:?}", row);
        }
    }

    #[test]
    fn dilated_conv_preserves_length_under_even_padding(len in 3usize..40, layer in 0usize..5) {
        let d = 1usize << layer;
        let (left, right) = (d / 2, d - d / 2);
        let x = Tensor::constant(&[1, 1, len], vec![1.0; len]).unwrap();
        let w = Tensor::constant(&[2, 1, 2], vec![0.5; 4]).unwrap();
        let b = Tensor::zeros(&[2]);
        let attrs = Conv1dAttrs { dilation: d, stride: 1, pad_left: left, pad_right: right };
        let y = conv1d(&x, &w, &b, attrs).unwrap();
        prop_assert_eq!(y.shape(), &[1, 2, len][..]);
    }
}

#[test]
fn constant_tensor_has_zero_gradient() {
    let c = Tensor::constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let v = Tensor::var(&[3], vec![0.5, 0.5, 0.5]).unwrap();
    let g = grad(&v.mul(&c).unwrap().sum(), &[c.clone(), v.clone()], false).unwrap();
    assert_eq!(g[0].data(), &[0.0, 0.0, 0.0]);
    assert_eq!(g[1].data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn retained_gradient_is_differentiable() {
    // f = sum(x^3): grad 3x^2, and d/dx sum(grad) = 6x.
    let x = Tensor::var(&[2], vec![1.5, -2.0]).unwrap();
    let f = x.mul(&x).unwrap().mul(&x).unwrap().sum();
    let g = grad(&f, &[x.clone()], true).unwrap().remove(0);
    assert_eq!(g.data(), &[6.75, 12.0]);
    let h = grad(&g.sum(), &[x.clone()], false).unwrap().remove(0);
    assert_eq!(h.data(), &[9.0, -12.0]);
}

#[test]
fn detached_gradient_is_constant() {
    let x = Tensor::var(&[2], vec![1.5, -2.0]).unwrap();
    let f = x.mul(&x).unwrap().sum();
    let g = grad(&f, &[x.clone()], false).unwrap().remove(0);
    assert!(!g.requires_grad());
}

#[test]
fn half_square_norm_difference_check() {
    let mut p = ParamSet::new();
    p.push("t", Tensor::constant(&[3], vec![0.7, -1.3, 2.2]).unwrap(), Partition::Adapted).unwrap();
    let rep = finite_difference_check(|q| Ok(q.get("t")?.mul(q.get("t")?)?.sum().scale(0.5)), &p, 1e-5).unwrap();
    assert!(rep.passes(1e-7), "{}", rep.max_rel_err);
    let flat = finite_difference_check(|_| Ok(Tensor::scalar(4.0)), &p, 1e-5).unwrap();
    assert_eq!(flat.max_rel_err, 0.0);
}
