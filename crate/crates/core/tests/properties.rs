mod common;

use common::{kernel_oracle, mmd_oracle};
use mmd_forge::autodiff::Activation;
use mmd_forge::kernels::{check_psd, Kernel, KernelSpec, RbfConvention};
use mmd_forge::mmd::{self, moment_diagnostic, Estimator};
use mmd_forge::networks::{Mlp, MlpConfig};
use mmd_forge::optim::clip_params;
use mmd_forge::{rng, Tensor};
use proptest::prelude::*;

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: usize) -> impl Strategy<Value = Tensor> {
    rows.prop_flat_map(move |r| {
        prop::collection::vec(-2.0f64..2.0, r * cols).prop_map(move |v| Tensor::new(r, cols, v).unwrap())
    })
}

fn pair(max_rows: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..=4).prop_flat_map(move |d| (matrix(2..=max_rows, d), matrix(2..=max_rows, d)))
}

fn kernel() -> impl Strategy<Value = Kernel> {
    let conv = prop_oneof![
        Just(RbfConvention::TwoSigmaSq),
        Just(RbfConvention::SigmaSq),
        Just(RbfConvention::Sigma)
    ];
    prop_oneof![
        (0.2f64..5.0, conv.clone()).prop_map(|(sigma, convention)| Kernel::Gaussian { sigma, convention }),
        (prop::collection::vec(0.2f64..8.0, 1..5), conv).prop_map(|(sigmas, convention)| Kernel::MixtureRbf { sigmas, convention }),
        Just(Kernel::Linear),
        (1u32..4, 0.0f64..2.0).prop_map(|(degree, offset)| Kernel::Polynomial { degree, offset }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn estimators_match_double_loop((x, y) in pair(12), k in kernel()) {
        for (est, unbiased) in [(Estimator::Biased, false), (Estimator::Unbiased, true)] {
            let got = mmd::mmd2(&x, &y, KernelSpec::Plain(&k), est).unwrap().estimate;
            let want = mmd_oracle(&k, &x, &y, unbiased);
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn gram_matches_oracle_and_is_symmetric((x, _y) in pair(10), k in kernel()) {
        let g = k.gram(&x, &x).unwrap();
        for i in 0..x.rows() {
            for j in 0..x.rows() {
                prop_assert_eq!(g.get(i, j), g.get(j, i));
                let want = kernel_oracle(&k, x.row(i), x.row(j));
                prop_assert!((g.get(i, j) - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gram_is_positive_semidefinite((x, _y) in pair(10), k in kernel()) {
        let g = k.gram(&x, &x).unwrap();
        let scale = (0..g.rows()).map(|i| g.get(i, i).abs()).fold(1.0, f64::max);
        prop_assert!(check_psd(&g).unwrap() >= -1e-9 * scale);
    }

    #[test]
    fn biased_mmd_is_symmetric_and_nonnegative((x, y) in pair(10), k in kernel()) {
        let a = mmd::mmd2_biased(&x, &y, KernelSpec::Plain(&k)).unwrap().estimate;
        let b = mmd::mmd2_biased(&y, &x, KernelSpec::Plain(&k)).unwrap().estimate;
        prop_assert_eq!(a, b);
        prop_assert!(a >= -1e-12);
    }

    #[test]
    fn biased_mmd_root_obeys_triangle_inequality(
        (x, y) in pair(8),
        seed in any::<u64>(),
        k in kernel(),
    ) {
        let mut r = rng::seeded(seed);
        let z = Tensor::from_fn(5, x.cols(), |_, _| rand::Rng::random_range(&mut r, -2.0..2.0));
        let d = |a: &Tensor, b: &Tensor| mmd::mmd2_biased(a, b, KernelSpec::Plain(&k)).unwrap().estimate.max(0.0).sqrt();
        let scale = d(&x, &z).max(1.0);
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-9 * scale);
    }

    #[test]
    fn composed_kernel_is_base_kernel_on_codes((x, y) in pair(8), seed in any::<u64>(), k in kernel()) {
        let enc = Mlp::init(&MlpConfig::new(vec![x.cols(), 5, 3], Activation::Tanh), &mut rng::seeded(seed)).unwrap();
        let composed = mmd::mmd2_unbiased(&x, &y, KernelSpec::Composed { inner: &k, encoder: &enc }).unwrap().estimate;
        let (fx, fy) = (enc.forward(&x).unwrap(), enc.forward(&y).unwrap());
        let plain = mmd::mmd2_unbiased(&fx, &fy, KernelSpec::Plain(&k)).unwrap().estimate;
        prop_assert_eq!(composed, plain);
    }

    #[test]
    fn sign_flip_leaves_gaussian_mmd_unchanged((x, y) in pair(10), seed in any::<u64>()) {
        let mut enc = Mlp::init(&MlpConfig::new(vec![x.cols(), 6, 6, 3], Activation::Relu), &mut rng::seeded(seed)).unwrap();
        let k = Kernel::default();
        let before = mmd::mmd2_biased(&x, &y, KernelSpec::Composed { inner: &k, encoder: &enc }).unwrap().estimate;
        enc.flip_output_sign();
        let after = mmd::mmd2_biased(&x, &y, KernelSpec::Composed { inner: &k, encoder: &enc }).unwrap().estimate;
        prop_assert!((before - after).abs() <= 1e-12);
    }

    #[test]
    fn moment_identity_holds((x, y) in pair(10)) {
        let rep = moment_diagnostic(&x, &y).unwrap();
        prop_assert!(rep.identity_residual() < 1e-10);
    }

    #[test]
    fn clipping_is_idempotent_and_bounded(v in prop::collection::vec(-1.0f64..1.0, 1..40), c in 0.001f64..0.5) {
        let mut p = Tensor::row_vector(v);
        clip_params(&mut [&mut p], c).unwrap();
        prop_assert!(p.data().iter().all(|x| x.abs() <= c));
        let once = p.clone();
        clip_params(&mut [&mut p], c).unwrap();
        prop_assert_eq!(p, once);
    }

    #[test]
    fn unbiased_mmd_is_invariant_to_row_order((x, y) in pair(10), seed in any::<u64>(), k in kernel()) {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..x.rows()).collect();
        idx.shuffle(&mut rng::seeded(seed));
        let a = mmd::mmd2_unbiased(&x, &y, KernelSpec::Plain(&k)).unwrap().estimate;
        let b = mmd::mmd2_unbiased(&x.select_rows(&idx), &y, KernelSpec::Plain(&k)).unwrap().estimate;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn unbiased_estimator_is_unbiased_for_a_known_gap() {
    // Linear kernel: E[M̂²_u] = ‖μ_P − μ_Q‖² exactly. Average many small
    // replicates with means 0 and (1, 0).
    let k = Kernel::Linear;
    let mut r = rng::seeded(42);
    let reps = 4000;
    let mut acc = 0.0;
    for _ in 0..reps {
        let x = Tensor::from_fn(5, 2, |_, _| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r));
        let y = Tensor::from_fn(5, 2, |_, j| {
            let e: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r);
            e + if j == 0 { 1.0 } else { 0.0 }
        });
        acc += mmd::mmd2_unbiased(&x, &y, KernelSpec::Plain(&k)).unwrap().estimate;
    }
    let mean = acc / reps as f64;
    // Replicate standard deviation is about 1.2, so the mean has s.e. ≈ 0.02.
    assert!((mean - 1.0).abs() < 0.08, "{mean}");
}
