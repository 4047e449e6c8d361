use encap_autodiff::{Graph, Tensor};
use encap_core::capsule::CapsuleGrid;
use encap_core::params::{Ctx, ParamStore};
use encap_core::sinkhorn::{
    brute_force_ot, cost_matrix, kl_divergence, kl_feature_loss, ot_loss, sinkhorn, sinkhorn_divergence, CostKind, Extractor, Generator, OtConfig,
    BRUTE_FORCE_MAX,
};
use encap_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn loss_of(q: &[f64], n: usize, cfg: &OtConfig) -> f64 {
    let mut g = Graph::<f64>::new();
    let qv = g.leaf(Tensor::new(vec![n, n], q.to_vec()).unwrap());
    let l = ot_loss(&mut g, qv, cfg).unwrap();
    g.value(l).item()
}

#[test]
fn generator_shapes_and_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, size, out) in [(1, 4, 4), (2, 4, 8)] {
        let mut store = ParamStore::<f64>::new(2);
        // 3 higher capsules of dim 2 back to 4 lower capsules of dim 3.
        let gen = Generator::new(&mut store, "gen", 3, 2, 4, 3, stride).unwrap();
        let x = uniform(&[2, 6, size, size], &mut rng);
        let w = store.value(gen.w).clone();
        assert_eq!(w.shape(), &[6, 6, 3, 3]);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv_transpose2d(xv, wv, gen.cfg).unwrap();
        assert_eq!(g.shape(y), &[2, 12, out, out]);
        // Scatter each input pixel through the kernel, two groups of 3 input channels.
        let mut expect = Tensor::zeros(vec![2, 12, out, out]);
        for b in 0..2 {
            for ci in 0..6 {
                let grp = ci / 3;
                for iy in 0..size {
                    for ix in 0..size {
                        for oc in 0..6 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let oy = (iy * stride + ky) as isize - 1;
                                    let ox = (ix * stride + kx) as isize - 1;
                                    if oy < 0 || ox < 0 || oy >= out as isize || ox >= out as isize {
                                        continue;
                                    }
                                    let o = grp * 6 + oc;
                                    expect.data_mut()[((b * 12 + o) * out + oy as usize) * out + ox as usize] +=
                                        x.at(&[b, ci, iy, ix]) * w.at(&[ci, oc, ky, kx]);
                                }
                            }
                        }
                    }
                }
            }
        }
        assert!(g.value(y).max_abs_diff(&expect) < 1e-13);

        let grid = CapsuleGrid::new(&g, xv, 2).unwrap();
        let mut ctx = Ctx::frozen(&mut g, &mut store, true);
        let u = gen.forward(&mut ctx, grid, &[2, 12, out, out]).unwrap();
        assert_eq!(u.dim, 3);
        let v = g.value(u.var);
        let hw = out * out;
        for b in 0..2 {
            for c in 0..4 {
                for p in 0..hw {
                    let n: f64 = (0..3).map(|e| v.data()[((b * 4 + c) * 3 + e) * hw + p].powi(2)).sum::<f64>().sqrt();
                    assert!(n < 1.0);
                }
            }
        }
    }
}

#[test]
fn generator_rejects_wrong_target() {
    let mut store = ParamStore::<f64>::new(0);
    let gen = Generator::new(&mut store, "gen", 2, 2, 2, 2, 2).unwrap();
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![1, 4, 3, 3]));
    let grid = CapsuleGrid::new(&g, x, 2).unwrap();
    let mut ctx = Ctx::frozen(&mut g, &mut store, true);
    assert!(matches!(gen.forward(&mut ctx, grid, &[1, 4, 7, 7]), Err(Error::Config(_))));
}

#[test]
fn extractor_examples() {
    let mut store = ParamStore::<f64>::new(3);
    let ext = Extractor::new(&mut store, "ext", 32).unwrap();
    assert_eq!(store.value(ext.first.conv.w).shape(), &[8, 32, 3, 3]);
    assert_eq!(store.value(ext.second.conv.w).shape(), &[1, 8, 3, 3]);
    let run = |store: &mut ParamStore<f64>, x: Tensor<f64>| {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let f = ext.forward(&mut Ctx::frozen(&mut g, store, true), xv).unwrap();
        g.value(f).clone()
    };
    let zeros = run(&mut store, Tensor::zeros(vec![3, 32, 8, 8]));
    assert_eq!(zeros.shape(), &[3, 4]);
    assert!(zeros.data().iter().all(|&v| v == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform(&[3, 32, 8, 8], &mut rng);
    assert_eq!(run(&mut store, x.clone()), run(&mut store, x));
    assert!(matches!(Extractor::new(&mut store, "bad", 3), Err(Error::Config(_))));
}

#[test]
fn cosine_cost_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(vec![3, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 1.0, -1.0, -2.0, -3.0]).unwrap());
    let b = g.constant(Tensor::new(vec![2, 3], vec![2.0, 4.0, 6.0, 1.0, 0.0, 0.0]).unwrap());
    let q = cost_matrix(&mut g, a, b, CostKind::Cosine).unwrap();
    let v = g.value(q);
    assert_eq!(v.shape(), &[3, 2]);
    assert!(v.at(&[0, 0]).abs() < 1e-8);
    assert!((v.at(&[1, 1]) - 1.0).abs() < 1e-8);
    assert!((v.at(&[2, 0]) - 2.0).abs() < 1e-8);
}

#[test]
fn zero_cost_is_the_uniform_coupling() {
    for (r, c) in [(2, 2), (3, 5)] {
        let p = sinkhorn(&vec![0.0; r * c], r, c, 0.1, 3).unwrap();
        for &x in &p.p {
            assert!((x - 1.0 / (r * c) as f64).abs() < 1e-15);
        }
        assert!(p.row_sums().iter().all(|s| (s - 1.0 / r as f64).abs() < 1e-15));
        assert!(p.col_sums().iter().all(|s| (s - 1.0 / c as f64).abs() < 1e-15));
    }
}

#[test]
fn anti_diagonal_cost_picks_the_diagonal() {
    let q = [0.0, 1.0, 1.0, 0.0];
    let p = sinkhorn(&q, 2, 2, 0.1, 10).unwrap();
    // Closed-form entropic optimum: off-diagonal mass ½·e^{-1/ε} / (1 + e^{-1/ε}).
    let off = 0.5 / (1.0 + 10f64.exp());
    for (x, e) in p.p.iter().zip([0.5 - off, off, off, 0.5 - off]) {
        assert!((x - e).abs() < 1e-12, "{:?}", p.p);
    }
    let sharp = sinkhorn(&q, 2, 2, 0.02, 10).unwrap();
    for (x, e) in sharp.p.iter().zip([0.5, 0.0, 0.0, 0.5]) {
        assert!((x - e).abs() < 1e-6);
    }
    assert_eq!(brute_force_ot(&q, 2).unwrap(), 0.0);
    assert!(loss_of(&q, 2, &OtConfig::default()) < 1e-4);
}

#[test]
fn constant_cost_loss_is_the_constant() {
    for n in [1, 3, 4] {
        let l = loss_of(&vec![0.7; n * n], n, &OtConfig::default());
        assert!((l - 0.7).abs() < 1e-12);
    }
}

#[test]
fn sharp_sinkhorn_matches_assignment_on_three_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = OtConfig {
        eps: 0.01,
        iters: 200,
        ..OtConfig::default()
    };
    for _ in 0..10 {
        let q: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
        let exact = brute_force_ot(&q, 3).unwrap();
        let l = loss_of(&q, 3, &cfg);
        assert!((l - exact).abs() <= (0.02 * exact).max(1e-3), "{l} vs {exact}");
    }
}

#[test]
fn brute_force_examples() {
    assert_eq!(brute_force_ot(&[1.0; 16], 4).unwrap(), 1.0);
    // Hand check on 3×3: the best permutation is (0→2, 1→0, 2→1) at (1 + 2 + 3)/3.
    let q = [9.0, 9.0, 1.0, 2.0, 9.0, 9.0, 9.0, 3.0, 9.0];
    assert!((brute_force_ot(&q, 3).unwrap() - 2.0).abs() < 1e-15);
    let n = BRUTE_FORCE_MAX + 1;
    assert!(matches!(brute_force_ot(&vec![0.0; n * n], n), Err(Error::Refused(_))));
    assert!(brute_force_ot(&[0.0; 5], 2).is_err());
}

#[test]
fn divergence_of_a_set_with_itself_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for kind in [CostKind::Cosine, CostKind::L2] {
        let cfg = OtConfig {
            cost: kind,
            ..OtConfig::default()
        };
        let mut g = Graph::<f64>::new();
        let s = g.constant(uniform(&[5, 4], &mut rng));
        let d = sinkhorn_divergence(&mut g, s, s, &cfg).unwrap();
        assert_eq!(g.value(d).item(), 0.0);
    }
}

#[test]
fn divergence_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::<f64>::new();
    let a = g.constant(uniform(&[4, 3], &mut rng));
    let b = g.constant(uniform(&[4, 3], &mut rng));
    let cfg = OtConfig {
        iters: 100,
        ..OtConfig::default()
    };
    let ab = sinkhorn_divergence(&mut g, a, b, &cfg).unwrap();
    let ba = sinkhorn_divergence(&mut g, b, a, &cfg).unwrap();
    assert!((g.value(ab).item() - g.value(ba).item()).abs() < 1e-9);
}

#[test]
fn far_clusters_diverge_more_than_near_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base: Vec<[f64; 2]> = (0..4)
        .map(|_| [1.0 + 0.05 * rng.random_range(-1.0..1.0), 0.05 * rng.random_range(-1.0..1.0)])
        .collect();
    let rotate = |t: f64| -> Tensor<f64> {
        let (s, c) = t.sin_cos();
        Tensor::new(vec![4, 2], base.iter().flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect()).unwrap()
    };
    let shift = |d: f64| -> Tensor<f64> { Tensor::new(vec![4, 2], base.iter().flat_map(|p| [p[0] + d, p[1]]).collect()).unwrap() };
    let div = |a: Tensor<f64>, b: Tensor<f64>, kind| {
        let mut g = Graph::<f64>::new();
        let (a, b) = (g.constant(a), g.constant(b));
        let d = sinkhorn_divergence(
            &mut g,
            a,
            b,
            &OtConfig {
                cost: kind,
                ..OtConfig::default()
            },
        )
        .unwrap();
        g.value(d).item()
    };
    let real = rotate(0.0);
    assert!(div(rotate(2.0), real.clone(), CostKind::Cosine) > div(rotate(0.3), real.clone(), CostKind::Cosine));
    assert!(div(shift(3.0), real.clone(), CostKind::L2) > div(shift(0.5), real, CostKind::L2));
}

#[test]
fn single_sample_divergence_is_twice_the_cross_cost() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    let b = g.constant(Tensor::new(vec![1, 2], vec![0.0, 3.0]).unwrap());
    let d = sinkhorn_divergence(&mut g, a, b, &OtConfig::default()).unwrap();
    assert!((g.value(d).item() - 2.0).abs() < 1e-6);
}

#[test]
fn kl_feature_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = uniform(&[3, 4], &mut rng);
    let mut g = Graph::<f64>::new();
    let a = g.constant(x.clone());
    let b = g.constant(x);
    let same = kl_feature_loss(&mut g, a, b).unwrap();
    assert!(g.value(same).item().abs() < 1e-15);
    // softmax([ln 3, 0]) = [3/4, 1/4] against the uniform [1/2, 1/2].
    let p = g.constant(Tensor::new(vec![1, 2], vec![3f64.ln(), 0.0]).unwrap());
    let q = g.constant(Tensor::zeros(vec![1, 2]));
    let l = kl_feature_loss(&mut g, p, q).unwrap();
    let expect = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
    assert!((g.value(l).item() - expect).abs() < 1e-12);
    assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]) - 2f64.ln()).abs() < 1e-15);
}

fn simplex(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

proptest! {
    #[test]
    fn kl_is_nonnegative(p in prop::collection::vec(0.001f64..1.0, 2..8), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..p.len()).map(|_| rng.random_range(0.001..1.0)).collect();
        prop_assert!(kl_divergence(&simplex(&p), &simplex(&q)) >= -1e-15);
    }

    #[test]
    fn row_permutation_permutes_the_coupling(seed in any::<u64>(), rows in 2usize..5, cols in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0.0..2.0)).collect();
        let perm: Vec<usize> = (0..rows).rev().collect();
        let qp: Vec<f64> = (0..rows * cols).map(|i| q[perm[i / cols] * cols + i % cols]).collect();
        let a = sinkhorn(&q, rows, cols, 0.1, 10).unwrap();
        let b = sinkhorn(&qp, rows, cols, 0.1, 10).unwrap();
        for i in 0..rows * cols {
            prop_assert!((b.p[i] - a.p[perm[i / cols] * cols + i % cols]).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_assignment_is_below_the_entropic_cost(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4;
        let q: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..2.0)).collect();
        let cfg = OtConfig { iters: 200, ..OtConfig::default() };
        let sink = loss_of(&q, n, &cfg);
        prop_assert!(brute_force_ot(&q, n).unwrap() <= sink + cfg.eps * (n as f64).ln());
    }

    #[test]
    fn coupling_is_nonnegative_with_unit_mass(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6, iters in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0.0..2.0)).collect();
        let c = sinkhorn(&q, rows, cols, 0.1, iters).unwrap();
        prop_assert!(c.p.iter().all(|&x| x >= 0.0));
        // The last update fixes the row marginal.
        for s in c.row_sums() {
            prop_assert!((s - 1.0 / rows as f64).abs() < 1e-12);
        }
        prop_assert!((c.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
