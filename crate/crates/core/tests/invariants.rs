use genda_core::adapt::{augment::AugmentDraw, truncate_latent};
use genda_core::analysis::pca;
use genda_core::engine::Tensor;
use genda_core::metrics::linalg::{matmul, sqrtm_psd};
use genda_core::metrics::{frechet_distance, frechet_from_moments, precision_recall, FeatureSet, Moments};
use genda_core::rng::{stream, Stream};
use proptest::prelude::*;

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        rng_seed: proptest::test_runner::RngSeed::Fixed(11),
        failure_persistence: None,
        ..ProptestConfig::with_cases(cases)
    }
}

fn points(n: std::ops::Range<usize>, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n)
}

/// Random PSD matrix `B Bᵀ` (row-major).
fn psd(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, d * d).prop_map(move |b| {
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum();
            }
        }
        a
    })
}

/// Brute-force kNN coverage: sort every distance list in full.
fn brute_pr(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> (f64, f64) {
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let radius = |set: &[Vec<f64>], i: usize| {
        let mut d: Vec<f64> = (0..set.len()).filter(|&j| j != i).map(|j| d2(&set[i], &set[j])).collect();
        d.sort_by(f64::total_cmp);
        d[k - 1]
    };
    let cover = |manifold: &[Vec<f64>], probe: &[Vec<f64>]| {
        let radii: Vec<f64> = (0..manifold.len()).map(|j| radius(manifold, j)).collect();
        let hits = probe
            .iter()
            .filter(|p| manifold.iter().zip(&radii).any(|(m, r)| d2(p, m) <= *r))
            .count();
        hits as f64 / probe.len() as f64
    };
    (cover(real, fake), cover(fake, real))
}

proptest! {
    #![proptest_config(cfg(64))]

    #[test]
    fn frechet_is_symmetric_and_zero_on_itself(a in points(8..20, 3), b in points(8..20, 3)) {
        let fa = FeatureSet::raw(&a, "x").unwrap();
        let fb = FeatureSet::raw(&b, "x").unwrap();
        let ab = frechet_distance(&fa, &fb).unwrap();
        let ba = frechet_distance(&fb, &fa).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab), "{ab} vs {ba}");
        prop_assert!(frechet_distance(&fa, &fa).unwrap() <= 1e-8 * (1.0 + ab));
    }

    #[test]
    fn frechet_of_diagonal_moments_is_closed_form(
        ma in prop::collection::vec(-2.0f64..2.0, 4),
        mb in prop::collection::vec(-2.0f64..2.0, 4),
        va in prop::collection::vec(0.0f64..4.0, 4),
        vb in prop::collection::vec(0.0f64..4.0, 4),
    ) {
        let diag = |v: &[f64]| {
            let mut c = vec![0.0; 16];
            for i in 0..4 { c[i * 5] = v[i]; }
            c
        };
        let got = frechet_from_moments(
            &Moments { mean: ma.clone(), cov: diag(&va) },
            &Moments { mean: mb.clone(), cov: diag(&vb) },
        ).unwrap();
        let want: f64 = (0..4).map(|i| (ma[i] - mb[i]).powi(2) + (va[i].sqrt() - vb[i].sqrt()).powi(2)).sum();
        prop_assert!((got - want).abs() <= 1e-6 * (1.0 + want), "{got} vs {want}");
    }

    #[test]
    fn precision_recall_matches_brute_force(
        real in points(4..32, 2),
        fake in points(4..32, 2),
        k in 1usize..4,
    ) {
        let (p, r) = precision_recall(
            &FeatureSet::raw(&real, "x").unwrap(),
            &FeatureSet::raw(&fake, "x").unwrap(),
            k,
        ).unwrap();
        prop_assert_eq!((p, r), brute_pr(&real, &fake, k));
    }

    #[test]
    fn sqrtm_squares_back(a in psd(4)) {
        let s = sqrtm_psd(&a, 4).unwrap();
        let back = matmul(&s, &s, 4);
        let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (x, y) in back.iter().zip(&a) {
            prop_assert!((x - y).abs() <= 1e-8 * scale, "{x} vs {y}");
        }
        for i in 0..4 {
            for j in 0..4 {
                prop_assert!((s[i * 4 + j] - s[j * 4 + i]).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn pca_with_all_components_reconstructs(rows in points(6..15, 4)) {
        let res = pca(&rows, 4).unwrap();
        for (u, i) in res.components.iter().zip(0..) {
            for (v, j) in res.components.iter().zip(0..) {
                let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() < 1e-8);
            }
        }
        for (row, proj) in rows.iter().zip(&res.projections) {
            for c in 0..4 {
                let x = res.mean[c] + (0..4).map(|k| proj[k] * res.components[k][c]).sum::<f64>();
                prop_assert!((x - row[c]).abs() < 1e-8, "{x} vs {}", row[c]);
            }
        }
        let total: f64 = res.explained_variance_ratio.iter().sum();
        prop_assert!(total <= 1.0 + 1e-9);
        prop_assert!(res.explained_variance_ratio.windows(2).all(|w| w[0] >= w[1] - 1e-12));
    }

    #[test]
    fn truncation_scales_spread_by_beta(
        w in prop::collection::vec(-3.0f64..3.0, 40),
        avg in prop::collection::vec(-1.0f64..1.0, 4),
        beta in 0.05f64..1.0,
    ) {
        let wt = Tensor::<f32>::from_f64_slice(&[10, 4], &w).unwrap();
        let at = Tensor::<f32>::from_f64_slice(&[1, 4], &avg).unwrap();
        let out = truncate_latent(&wt, &at, beta).unwrap();
        for c in 0..4 {
            let col = |t: &Tensor<f32>| (0..10).map(|r| t.row(r)[c] as f64).collect::<Vec<_>>();
            let (x, y) = (col(&wt), col(&out));
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let var = |v: &[f64]| { let m = mean(v); v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64 };
            prop_assert!((var(&y) - beta * beta * var(&x)).abs() <= 1e-5 * (1.0 + var(&x)));
            let want_mean = beta * mean(&x) + (1.0 - beta) * at.data()[c] as f64;
            prop_assert!((mean(&y) - want_mean).abs() <= 1e-5);
        }
    }
}

proptest! {
    #![proptest_config(cfg(8))]

    #[test]
    fn augmentation_fires_at_its_strength(strength in 0.25f64..=1.0, seed in 0u64..1000) {
        let n = 10_000;
        let mut rng = stream(seed, Stream::Augment);
        let draws: Vec<AugmentDraw> = (0..n).map(|_| AugmentDraw::sample(strength, 16, &mut rng)).collect();
        let rate = |f: &dyn Fn(&AugmentDraw) -> bool| draws.iter().filter(|d| f(d)).count() as f64 / n as f64;
        for (name, r) in [
            ("flip", rate(&|d| d.flip)),
            ("translate", rate(&|d| d.translate.is_some())),
            ("brightness", rate(&|d| d.brightness.is_some())),
            ("cutout", rate(&|d| d.cutout.is_some())),
        ] {
            prop_assert!((r - strength).abs() < 0.02, "{name}: {r} at strength {strength}");
        }
        let max_t = (strength * 4.0).floor() as i64;
        for d in &draws {
            if let Some((dx, dy)) = d.translate {
                prop_assert!(dx.abs() <= max_t && dy.abs() <= max_t);
            }
            if let Some(b) = d.brightness {
                prop_assert!(b.abs() <= 0.2 * strength + 1e-12);
            }
            if let Some((x0, y0, side)) = d.cutout {
                prop_assert_eq!(side, (strength * 8.0).floor() as usize);
                prop_assert!(x0 + side <= 16 && y0 + side <= 16);
            }
        }
    }
}

#[test]
fn zero_strength_draws_nothing() {
    let mut rng = stream(0, Stream::Augment);
    assert!((0..1000).all(|_| AugmentDraw::sample(0.0, 16, &mut rng).is_identity()));
}
