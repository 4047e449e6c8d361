use encap_autodiff::{Graph, Tensor};
use encap_core::capsule::{capfc, margin_loss, norms, predict, squash, CapsuleGrid, MarginCfg};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn squash_vec(s: &[f64]) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, s.len()], s));
    let v = squash(&mut g, x, 1).unwrap();
    g.value(v).data().to_vec()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Class capsules `[1, K, 2]` whose norms are `lens`, all along the first axis.
fn capsules_with_norms(lens: &[f64]) -> Tensor<f64> {
    let data: Vec<f64> = lens.iter().flat_map(|&l| [l, 0.0]).collect();
    t(&[1, lens.len(), 2], &data)
}

fn margin(lens: &[f64], label: usize) -> f64 {
    let mut g = Graph::<f64>::new();
    let v = g.constant(capsules_with_norms(lens));
    let l = margin_loss(&mut g, v, &[label], MarginCfg::default()).unwrap();
    g.value(l).item()
}

#[test]
fn squash_examples() {
    assert_eq!(squash_vec(&[0.0, 0.0, 0.0]), vec![0.0; 3]);
    let v = squash_vec(&[0.6, 0.8]);
    assert!((norm(&v) - 0.5).abs() < 1e-8);
    assert!((v[0] / v[1] - 0.75).abs() < 1e-12);
    let s = [1.2, -1.6];
    let v = squash_vec(&s);
    for (a, b) in v.iter().zip(&s) {
        assert!((a - 0.4 * b).abs() < 1e-8);
    }
}

#[test]
fn margin_loss_examples() {
    let mut lens = vec![0.1; 10];
    lens[3] = 0.9;
    assert!(margin(&lens, 3).abs() < 1e-15);
    assert!((margin(&[0.0; 10], 0) - 0.81).abs() < 1e-12);
    let mut lens = vec![0.0; 10];
    lens[0] = 0.5;
    lens[1] = 0.5;
    assert!((margin(&lens, 0) - 0.24).abs() < 1e-12);
}

#[test]
fn margin_loss_rejects_bad_label() {
    let mut g = Graph::<f64>::new();
    let v = g.constant(capsules_with_norms(&[0.1, 0.2]));
    assert!(matches!(margin_loss(&mut g, v, &[2], MarginCfg::default()), Err(encap_core::Error::Input(_))));
}

#[test]
fn capfc_single_input_unit_weight_is_squash() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 1, 3], &[0.5, -1.0, 2.0]));
    let w = g.constant(Tensor::ones(vec![3, 1, 1]));
    let y = capfc(&mut g, x, w).unwrap();
    let expect = squash_vec(&[0.5, -1.0, 2.0]);
    assert_eq!(g.value(y).data(), expect.as_slice());
}

#[test]
fn capfc_zero_weights_predict_class_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn(vec![2, 4, 3], |i| i as f64 * 0.1));
    let w = g.constant(Tensor::zeros(vec![3, 4, 5]));
    let y = capfc(&mut g, x, w).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    assert_eq!(predict(g.value(y)), vec![0, 0]);
}

#[test]
fn capfc_matches_per_dimension_loops() {
    let (b, n, k, d) = (2, 4, 2, 3);
    let x = Tensor::from_fn(vec![b, n, d], |i| ((i * 37 % 11) as f64 - 5.0) / 4.0);
    let w = Tensor::from_fn(vec![d, n, k], |i| ((i * 53 % 13) as f64 - 6.0) / 7.0);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = capfc(&mut g, xv, wv).unwrap();
    for bi in 0..b {
        for c in 0..k {
            let s: Vec<f64> = (0..d).map(|dd| (0..n).map(|i| x.at(&[bi, i, dd]) * w.at(&[dd, i, c])).sum()).collect();
            let expect = squash_vec(&s);
            for dd in 0..d {
                assert!((g.value(y).at(&[bi, c, dd]) - expect[dd]).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn capfc_rejects_mismatched_weight() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![1, 4, 3]));
    let w = g.constant(Tensor::zeros(vec![2, 4, 5]));
    assert!(capfc(&mut g, x, w).is_err());
}

#[test]
fn predict_examples() {
    assert_eq!(predict(&capsules_with_norms(&[0.1, 0.9, 0.2])), vec![1]);
    assert_eq!(predict(&capsules_with_norms(&[0.3, 0.3, 0.3])), vec![0]);
    let mut lens = vec![0.1; 10];
    lens[6] = 0.9;
    assert_eq!(predict(&capsules_with_norms(&lens)), vec![6]);
}

#[test]
fn grid_layout_is_channel_major() {
    // 2 channels of 3-dim capsules on a 1×2 map: capsule (c, x) is channels c*3..c*3+3 at x.
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn(vec![1, 6, 1, 2], |i| i as f64));
    let grid = CapsuleGrid::new(&g, x, 3).unwrap();
    assert_eq!(grid.channels, 2);
    let flat = grid.flatten(&mut g).unwrap();
    assert_eq!(g.shape(flat), &[1, 4, 3]);
    // capsule 1 = channel 0 at x=1: blob entries (ch0,x1),(ch1,x1),(ch2,x1) = 1,3,5
    assert_eq!(&g.value(flat).data()[3..6], &[1.0, 3.0, 5.0]);
    let bad = g.constant(Tensor::zeros(vec![1, 5, 1, 1]));
    assert!(CapsuleGrid::new(&g, bad, 3).is_err());
}

proptest! {
    #[test]
    fn squash_is_bounded_and_monotone(dir in prop::collection::vec(-1.0f64..1.0, 4), a in 0.0f64..50.0, b in 0.0f64..50.0) {
        prop_assume!(norm(&dir) > 1e-3);
        let unit: Vec<f64> = dir.iter().map(|x| x / norm(&dir)).collect();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-6);
        let v_lo = squash_vec(&unit.iter().map(|x| x * lo).collect::<Vec<_>>());
        let v_hi = squash_vec(&unit.iter().map(|x| x * hi).collect::<Vec<_>>());
        prop_assert!(norm(&v_hi) < 1.0);
        prop_assert!(norm(&v_lo) < norm(&v_hi));
    }

    #[test]
    fn predict_ignores_common_rescaling(lens in prop::collection::vec(0.0f64..1.0, 2..10), scale in 0.01f64..100.0) {
        let scaled: Vec<f64> = lens.iter().map(|l| l * scale).collect();
        prop_assert_eq!(predict(&capsules_with_norms(&lens)), predict(&capsules_with_norms(&scaled)));
    }

    #[test]
    fn margin_zero_iff_hinges_inactive(lens in prop::collection::vec(0.0f64..1.0, 3..8), label in 0usize..3) {
        let m = MarginCfg::default();
        let inactive = lens[label] >= m.m_plus && lens.iter().enumerate().all(|(k, &l)| k == label || l <= m.m_minus);
        prop_assert_eq!(margin(&lens, label) == 0.0, inactive);
    }

    #[test]
    fn norms_match_vector_lengths(data in prop::collection::vec(-3.0f64..3.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4, 3], &data));
        let n = norms(&mut g, x, 2).unwrap();
        for c in 0..4 {
            prop_assert!((g.value(n).data()[c] - norm(&data[c * 3..c * 3 + 3])).abs() < 1e-6);
        }
    }
}
