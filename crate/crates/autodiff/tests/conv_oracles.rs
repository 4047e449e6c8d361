//! Convolution checked against direct loop references.

use encap_autodiff::{Conv2dCfg, ConvTranspose2dCfg, Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

/// Six nested loops, straight from the definition.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize, groups: usize) -> Tensor<f64> {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cpg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cpg * groups, cin);
    let opg = cout / groups;
    let ho = (h + 2 * p - kh) / s + 1;
    let wo = (wd + 2 * p - kw) / s + 1;
    let mut out = Tensor::zeros(vec![b, cout, ho, wo]);
    let od = out.data_mut();
    for bi in 0..b {
        for co in 0..cout {
            let grp = co / opg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cpg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[bi, grp * cpg + ci, iy as usize, ix as usize]) * w.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                    od[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Transposed convolution as an explicit scatter of every input pixel.
fn naive_scatter(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize, op: usize, groups: usize) -> Tensor<f64> {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (_, opg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ipg = cin / groups;
    let cout = opg * groups;
    let ho = (h - 1) * s + kh + op - 2 * p;
    let wo = (wd - 1) * s + kw + op - 2 * p;
    let mut out = Tensor::zeros(vec![b, cout, ho, wo]);
    let od = out.data_mut();
    for bi in 0..b {
        for ci in 0..cin {
            let grp = ci / ipg;
            for iy in 0..h {
                for ix in 0..wd {
                    let v = x.at(&[bi, ci, iy, ix]);
                    for co in 0..opg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * s + ky) as isize - p as isize;
                                let ox = (ix * s + kx) as isize - p as isize;
                                if oy < 0 || ox < 0 || oy >= ho as isize || ox >= wo as isize {
                                    continue;
                                }
                                let c = grp * opg + co;
                                od[((bi * cout + c) * ho + oy as usize) * wo + ox as usize] += v * w.at(&[ci, co, ky, kx]);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(cin, cout, g, k, s, p) in &[(4, 6, 2, 3, 1, 1), (3, 3, 1, 3, 2, 0), (6, 6, 3, 1, 1, 0), (4, 8, 4, 3, 2, 1)] {
        let x = randn(&[2, cin, 7, 6], &mut rng);
        let w = randn(&[cout, cin / g, k, k], &mut rng);
        let mut gr = Graph::new();
        let (xv, wv) = (gr.constant(x.clone()), gr.constant(w.clone()));
        let y = gr.conv2d(xv, wv, Conv2dCfg::new(s, p, g)).unwrap();
        let reference = naive_conv(&x, &w, s, p, g);
        assert!(gr.value(y).max_abs_diff(&reference) < 1e-10);
    }
}

#[test]
fn transpose_matches_naive_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for &(cin, cout, g, k, s, p, op) in &[(2, 3, 1, 3, 2, 1, 1), (4, 4, 2, 3, 1, 1, 0), (4, 2, 2, 2, 2, 0, 0)] {
        let x = randn(&[2, cin, 4, 4], &mut rng);
        let w = randn(&[cin, cout / g, k, k], &mut rng);
        let mut gr = Graph::new();
        let (xv, wv) = (gr.constant(x.clone()), gr.constant(w.clone()));
        let y = gr.conv_transpose2d(xv, wv, ConvTranspose2dCfg::new(s, p, op, g)).unwrap();
        let reference = naive_scatter(&x, &w, s, p, op, g);
        assert_eq!(gr.shape(y), reference.shape());
        assert!(gr.value(y).max_abs_diff(&reference) < 1e-10);
    }
    // The 4x4 -> 8x8 case.
    let x = randn(&[1, 2, 4, 4], &mut rng);
    assert_eq!(naive_scatter(&x, &randn(&[2, 1, 3, 3], &mut rng), 2, 1, 1, 1).shape(), &[1, 1, 8, 8]);
}

fn adjoint_gap(seed: u64, cin: usize, cout: usize, g: usize, k: usize, s: usize, p: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = randn(&[2, cin, 5, 5], &mut rng);
    let w = randn(&[cout, cin / g, k, k], &mut rng);
    let mut gr = Graph::new();
    let (xv, wv) = (gr.constant(x.clone()), gr.constant(w.clone()));
    let y = gr.conv2d(xv, wv, Conv2dCfg::new(s, p, g)).unwrap();
    let v = randn(gr.shape(y), &mut rng);
    // Pick output_padding so the transpose lands back on 5x5.
    let ho = gr.shape(y)[2];
    let op = 5 + 2 * p - ((ho - 1) * s + k);
    let vv = gr.constant(v.clone());
    let z = gr.conv_transpose2d(vv, wv, ConvTranspose2dCfg::new(s, p, op, g)).unwrap();
    assert_eq!(gr.shape(z), x.shape());
    let lhs = gr.value(y).dot(&v);
    let rhs = x.dot(gr.value(z));
    (lhs - rhs).abs() / lhs.abs().max(1.0)
}

#[test]
fn transpose_is_adjoint_on_fixed_instances() {
    assert!(adjoint_gap(1, 4, 4, 1, 3, 1, 1) < 1e-10);
    assert!(adjoint_gap(2, 4, 6, 2, 3, 2, 1) < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adjoint_identity_holds(
        seed in any::<u64>(),
        g in 1usize..=2,
        cpg in 1usize..=2,
        opg in 1usize..=3,
        k in prop::sample::select(vec![1usize, 2, 3]),
        s in 1usize..=2,
        p in 0usize..=1,
    ) {
        prop_assume!(p < k);
        prop_assert!(adjoint_gap(seed, g * cpg, g * opg, g, k, s, p) < 1e-10);
    }

    #[test]
    fn grouped_conv_equals_sliced_convs(
        seed in any::<u64>(),
        g in 1usize..=3,
        cpg in 1usize..=2,
        opg in 1usize..=2,
        k in prop::sample::select(vec![1usize, 3]),
        s in 1usize..=2,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cin, cout) = (g * cpg, g * opg);
        let x = randn(&[2, cin, 5, 4], &mut rng);
        let w = randn(&[cout, cpg, k, k], &mut rng);
        let pad = k / 2;
        let mut gr = Graph::new();
        let (xv, wv) = (gr.constant(x), gr.constant(w));
        let whole = gr.conv2d(xv, wv, Conv2dCfg::new(s, pad, g)).unwrap();
        let parts: Vec<_> = (0..g)
            .map(|i| {
                let xs = gr.narrow(xv, 1, i * cpg, cpg).unwrap();
                let ws = gr.narrow(wv, 0, i * opg, opg).unwrap();
                gr.conv2d(xs, ws, Conv2dCfg::new(s, pad, 1)).unwrap()
            })
            .collect();
        let cat = gr.concat(&parts, 1).unwrap();
        prop_assert_eq!(gr.value(whole), gr.value(cat));
    }

    #[test]
    fn softmax_sums_to_one(data in prop::collection::vec(-50.0f64..50.0, 12), axis in 0usize..3) {
        let mut gr = Graph::new();
        let x = gr.constant(Tensor::new(vec![2, 3, 2], data).unwrap());
        let s = gr.softmax(x, axis).unwrap();
        let total = gr.sum_axis(s, axis, false).unwrap();
        for &v in gr.value(total).data() {
            prop_assert!((v - 1.0).abs() < 1e-12);
        }
        prop_assert!(gr.value(s).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
