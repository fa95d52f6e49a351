//! Dense tensors with a small reverse-mode autodiff tape.
//!
//! The op set is fixed to what the probes, heads and losses need: conv2d,
//! bilinear upsampling, relu/softplus/add/mul/scale, channel softmax,
//! sum/mean reductions, channel L2 normalization, channel slicing, and an
//! eager "functional" node for losses whose gradient is computed in closed
//! form elsewhere.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{
    compare_with_finite_differences, grad_check, grad_check_strided, value_and_grad, GradCheckReport, ScalarFn,
};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use tensor::{Real, Tensor};

pub(crate) use graph::{sigmoid, softplus};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 4, 5], &mut rng);
        let w = Tensor::from_fn(vec![3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let xv = g.constant(x.clone());
        let wv = g.constant(w);
        let bv = g.constant(Tensor::zeros(vec![3]));
        let y = g.conv2d(xv, wv, bv, 1, 0).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn conv_ones_kernel_on_constant_field() {
        let mut g = Graph::<f32>::new();
        let c = 1.5f32;
        let xv = g.constant(Tensor::full(vec![1, 1, 5, 5], c));
        let wv = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let bv = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 1, 5, 5]);
        for r in 1..4 {
            for col in 1..4 {
                assert_eq!(out.data()[r * 5 + col], 9.0 * c);
            }
        }
        // corner sees 4 taps
        assert_eq!(out.data()[0], 4.0 * c);
    }

    #[test]
    fn conv_output_dims_follow_floor_formula() {
        let mut g = Graph::<f32>::new();
        let xv = g.constant(Tensor::zeros(vec![1, 2, 7, 6]));
        let wv = g.constant(Tensor::zeros(vec![4, 2, 3, 3]));
        let bv = g.constant(Tensor::zeros(vec![4]));
        let y = g.conv2d(xv, wv, bv, 2, 1).unwrap();
        // floor((7 + 2 - 3) / 2) + 1 = 4, floor((6 + 2 - 3) / 2) + 1 = 3
        assert_eq!(g.value(y).shape(), &[1, 4, 4, 3]);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let xv = g.constant(Tensor::zeros(vec![1, 3, 4, 4]));
        let wv = g.constant(Tensor::zeros(vec![2, 4, 3, 3]));
        let bv = g.constant(Tensor::zeros(vec![2]));
        let err = g.conv2d(xv, wv, bv, 1, 1).unwrap_err();
        match err {
            Error::Shape { left, right, .. } => {
                assert_eq!(left, vec![1, 3, 4, 4]);
                assert_eq!(right, vec![2, 4, 3, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(g.conv2d(xv, wv, bv, 0, 1).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (stride, padding) in [(1, 1), (2, 1), (1, 0)] {
            let point = vec![
                random(&[1, 4, 6, 6], &mut rng),
                random(&[3, 4, 3, 3], &mut rng),
                random(&[3], &mut rng),
            ];
            let report = grad_check(
                move |g: &mut Graph<f64>, v: &[Var]| {
                    let y = g.conv2d(v[0], v[1], v[2], stride, padding)?;
                    // weight the output so the loss is not linear in each entry
                    let sq = g.mul(y, y)?;
                    Ok(g.sum(sq))
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    /// Independent align-corners=false reference: sample position
    /// `(i + 0.5) / f - 0.5`, clamped into `[0, n - 1]`.
    fn reference_upsample(src: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
        let sample = |pos: f64, n: usize| -> (usize, usize, f64) {
            let p = pos.clamp(0.0, (n - 1) as f64);
            let lo = p.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, p - lo as f64)
        };
        let mut out = vec![];
        for oy in 0..h * f {
            let (y0, y1, ty) = sample((oy as f64 + 0.5) / f as f64 - 0.5, h);
            for ox in 0..w * f {
                let (x0, x1, tx) = sample((ox as f64 + 0.5) / f as f64 - 0.5, w);
                let at = |y: usize, x: usize| src[y * w + x];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * tx;
                let bot = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * tx;
                out.push(top + (bot - top) * ty);
            }
        }
        out
    }

    #[test]
    fn upsample_small_case_frozen() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let y = g.bilinear_upsample(x, 2).unwrap();
        #[rustfmt::skip]
        let expect = [
            0.0, 0.25, 0.75, 1.0,
            0.5, 0.75, 1.25, 1.5,
            1.5, 1.75, 2.25, 2.5,
            2.0, 2.25, 2.75, 3.0,
        ];
        assert_eq!(reference_upsample(&[0.0, 1.0, 2.0, 3.0], 2, 2, 2), expect);
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_matches_reference_and_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 2, 3, 4], &mut rng);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let y1 = g.bilinear_upsample(xv, 1).unwrap();
        assert_eq!(g.value(y1), &x);
        for f in 2..5 {
            let y = g.bilinear_upsample(xv, f).unwrap();
            assert_eq!(g.value(y).shape(), &[1, 2, 3 * f, 4 * f]);
            for c in 0..2 {
                let expect = reference_upsample(&x.data()[c * 12..][..12], 3, 4, f);
                let got = &g.value(y).data()[c * 12 * f * f..][..expect.len()];
                for (a, b) in got.iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        let cv = g.constant(Tensor::full(vec![1, 1, 3, 3], 2.5));
        let cu = g.bilinear_upsample(cv, 3).unwrap();
        assert!(g.value(cu).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        assert!(g.bilinear_upsample(cv, 0).is_err());
    }

    #[test]
    fn upsample_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let point = vec![random(&[1, 2, 3, 3], &mut rng), random(&[1, 2, 9, 9], &mut rng)];
        let r = grad_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let u = g.bilinear_upsample(v[0], 3)?;
                let m = g.mul(u, v[1])?;
                Ok(g.sum(m))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let sp = g.softplus(z);
        assert!((g.value(sp).data()[0] - 2f64.ln()).abs() < 1e-12);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        // relu subgradient at 0 is 0
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = g.relu(x);
        let s = g.sum(r);
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn broadcast_only_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones(vec![2, 3]));
        let b = g.constant(Tensor::ones(vec![3, 2]));
        assert!(g.add(a, b).is_err());
        assert!(g.mul(a, b).is_err());
        let s = g.constant(Tensor::scalar(4.0));
        let m = g.mul(a, s).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let point = vec![
            random(&[1, 2, 3, 3], &mut rng),
            random(&[1, 2, 3, 3], &mut rng),
            random(&[], &mut rng),
        ];
        let r = grad_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let a = g.relu(v[0]);
                let b = g.softplus(v[1]);
                let c = g.add(a, b)?;
                let d = g.mul(c, v[2])?;
                let e = g.mul(d, v[1])?;
                let f = g.scale(e, 0.7);
                let sb = g.add(f, v[2])?;
                Ok(g.mean(sb))
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![1, 4, 2, 2], 3.0));
        let y = g.softmax_channels(x).unwrap();
        assert!(g.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let x = g.constant(Tensor::new(vec![1, 2, 1, 1], vec![1000.0, 0.0]).unwrap());
        let y = g.softmax_channels(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let point = vec![
            random(&[1, 5, 3, 3], &mut rng).map(|x| 3.0 * x),
            random(&[1, 5, 3, 3], &mut rng),
        ];
        let r = grad_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let p = g.softmax_channels(v[0])?;
                let m = g.mul(p, v[1])?;
                Ok(g.sum(m))
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn normalize_and_slice_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let point = vec![random(&[1, 4, 3, 3], &mut rng), random(&[1, 3, 3, 3], &mut rng)];
        let r = grad_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let dir = g.slice_channels(v[0], 0, 3)?;
                let n = g.l2_normalize_channels(dir, 1e-8)?;
                let k = g.slice_channels(v[0], 3, 1)?;
                let k = g.softplus(k);
                let a = g.mul(n, v[1])?;
                let a = g.sum(a);
                let b = g.sum(k);
                let s = g.add(a, b)?;
                Ok(s)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn backward_basic_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let s = g.sum(x);
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[1.0; 4]);

        let sq = g.mul(x, x).unwrap();
        let s2 = g.sum(sq);
        assert_eq!(g.backward(s2).unwrap().wrt(x).data(), &[2.0, -4.0, 6.0, 1.0]);

        // unreachable parameter gets zeros; non-scalar loss rejected
        let unused = g.param(Tensor::ones(vec![3]));
        assert_eq!(g.backward(s2).unwrap().wrt(unused).data(), &[0.0; 3]);
        assert!(g.backward(sq).is_err());
    }

    #[test]
    fn gradients_accumulate_over_paths() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let a = g.scale(x, 3.0);
        let b = g.add(a, x).unwrap();
        let s = g.sum(b);
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[4.0, 4.0]);
    }

    #[test]
    fn records_are_topological() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::ones(vec![1, 1, 2, 2]));
        let y = g.relu(x);
        let z = g.add(y, x).unwrap();
        let _ = g.sum(z);
        for (_, inputs, out) in g.records() {
            assert!(inputs.iter().all(|i| i < &out));
        }
    }

    #[test]
    fn grad_check_reference_cases() {
        let point = vec![Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()];
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        };
        assert!(grad_check(f, &point, 1e-5).unwrap().max_rel_error < 1e-8);

        // negative control: analytic gradient halved (numeric is 2x the claim)
        let wrong = vec![Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()];
        let r = compare_with_finite_differences(&f, &wrong, &point, 1e-5, None).unwrap();
        assert!((r.max_rel_error - 1.0).abs() < 1e-6, "{r:?}");
        // doubled gradient is also caught
        let doubled = vec![Tensor::new(vec![3], vec![4.0, 8.0, 12.0]).unwrap()];
        let r = compare_with_finite_differences(&f, &doubled, &point, 1e-5, None).unwrap();
        assert!(r.max_rel_error > 0.4);
        assert!(compare_with_finite_differences(&f, &wrong, &point, 0.0, None).is_err());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(&[1, 3, 6, 6], &mut rng).cast::<f32>();
        let w = random(&[5, 3, 3, 3], &mut rng).cast::<f32>();
        let run = || {
            let mut g = Graph::<f32>::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let bv = g.constant(Tensor::zeros(vec![5]));
            let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
            let y = g.bilinear_upsample(y, 2).unwrap();
            let y = g.softmax_channels(y).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_a_simplex(vals in proptest::collection::vec(-80.0f64..80.0, 12)) {
                let mut g = Graph::<f64>::new();
                let x = g.constant(Tensor::new(vec![1, 3, 2, 2], vals).unwrap());
                let y = g.softmax_channels(x).unwrap();
                let d = g.value(y).data();
                for p in 0..4 {
                    let s: f64 = (0..3).map(|k| d[k * 4 + p]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                    prop_assert!((0..3).all(|k| d[k * 4 + p] >= 0.0));
                }
            }

            #[test]
            fn forward_ops_stay_finite(vals in proptest::collection::vec(-1e3f32..1e3, 16)) {
                let mut g = Graph::<f32>::new();
                let x = g.constant(Tensor::new(vec![1, 4, 2, 2], vals).unwrap());
                let a = g.softplus(x);
                let b = g.softmax_channels(x).unwrap();
                let c = g.l2_normalize_channels(x, 1e-8).unwrap();
                let d = g.bilinear_upsample(x, 2).unwrap();
                for v in [a, b, c, d] {
                    prop_assert!(g.value(v).all_finite());
                }
            }
        }
    }
}
