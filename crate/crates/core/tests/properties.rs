use std::path::Path;

use fmd_core::data;
use fmd_core::metrics::{self, FrechetMode};
use fmd_core::schedule::{FractionLayout, NoiseSchedule, ScheduleKind};
use fmd_core::{Mat, Sample};
use ndarray::Array2;
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = ScheduleKind> {
    prop_oneof![Just(ScheduleKind::Cosine), Just(ScheduleKind::LinearLambda)]
}

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-5.0f64..5.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #[test]
    fn variance_preserving(steps in 2usize..2048, kind in kind()) {
        let s = NoiseSchedule::new(steps, kind).unwrap();
        for t in 0..=steps {
            prop_assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-12);
        }
    }

    /// With a fixed clean estimate, two strides of `k` equal one of `2k`.
    #[test]
    fn ddim_steps_compose(steps in 4usize..256, kind in kind(), x in mat(2, 3), frac in 0.0f64..1.0) {
        let s = NoiseSchedule::new(steps, kind).unwrap();
        let k = 1 + ((steps / 2 - 1) as f64 * frac) as usize;
        let t = steps;
        let x_t = &x * 0.3 + 1.0;
        let once = s.ddim_step(&x_t, &x, t, 2 * k).unwrap();
        let twice = s.ddim_step(&s.ddim_step(&x_t, &x, t, k).unwrap(), &x, t - k, k).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }
    }

    #[test]
    fn fraction_lookup_consistent(exp in 1u32..10, fexp in 0u32..4) {
        let steps = 1usize << exp;
        let fractions = 1usize << fexp.min(exp);
        let layout = FractionLayout::new(steps, fractions).unwrap();
        for t in 1..=steps {
            let f = layout.fraction_of_step(t).unwrap();
            prop_assert!(layout.end(f) <= t && t <= layout.start(f));
            prop_assert!(layout.contains(f, t));
        }
        prop_assert_eq!(layout.fraction_of_step(steps).unwrap(), fractions);
        prop_assert_eq!(layout.fraction_of_step(1).unwrap(), 1);
    }

    #[test]
    fn wasserstein_symmetric_and_shift(a in prop::collection::vec(-10.0f64..10.0, 1..40),
                                       b in prop::collection::vec(-10.0f64..10.0, 1..40),
                                       c in -5.0f64..5.0) {
        let ab = metrics::wasserstein_1d(&a, &b).unwrap();
        let ba = metrics::wasserstein_1d(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-10);
        let shifted: Vec<f64> = a.iter().map(|v| v + c).collect();
        prop_assert!((metrics::wasserstein_1d(&a, &shifted).unwrap() - c.abs()).abs() < 1e-10);
        let mut rev = a.clone();
        rev.reverse();
        prop_assert!(metrics::wasserstein_1d(&a, &rev).unwrap().abs() < 1e-12);
    }

    #[test]
    fn proximity_and_sparsity_bounds(x in mat(3, 4), y in mat(3, 4), thr in 0.0f64..3.0) {
        let (a, b) = (Sample::new("a", None, x).unwrap(), Sample::new("b", None, y).unwrap());
        prop_assert!(metrics::proximity(&a, &b).unwrap() >= 0.0);
        prop_assert_eq!(metrics::proximity(&a, &a).unwrap(), 0.0);
        let sp = metrics::sparsity(&a, &b, &[thr]).unwrap();
        prop_assert!((0.0..=100.0).contains(&sp));
        prop_assert_eq!(metrics::sparsity(&a, &a, &[thr]).unwrap(), 0.0);
    }

    /// Correlation ignores per-region positive affine rescaling.
    #[test]
    fn fc_affine_invariant(x in mat(4, 12), scale in prop::collection::vec(0.1f64..10.0, 4),
                           shift in prop::collection::vec(-5.0f64..5.0, 4)) {
        let mut y = x.clone();
        for (r, mut row) in y.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v * scale[r] + shift[r]);
        }
        let fx = metrics::fc_matrix(&x).unwrap();
        prop_assume!(fx.degenerate_regions.is_empty());
        let (a, b) = (fx.values, metrics::fc_matrix(&y).unwrap().values);
        for i in 0..4 {
            prop_assert_eq!(a[(i, i)], 1.0);
            for j in 0..4 {
                prop_assert_eq!(a[(i, j)], a[(j, i)]);
                prop_assert!((a[(i, j)] - b[(i, j)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frechet_mean_shift(pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 6..30),
                          d in prop::collection::vec(-2.0f64..2.0, 3)) {
        let shifted: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().zip(&d).map(|(a, b)| a + b).collect()).collect();
        let norm2: f64 = d.iter().map(|v| v * v).sum();
        for mode in [FrechetMode::Diagonal, FrechetMode::Full] {
            prop_assert!(metrics::frechet_distance(&pts, &pts, mode).unwrap() < 1e-8);
            let fd = metrics::frechet_distance(&pts, &shifted, mode).unwrap();
            prop_assert!((fd - norm2).abs() < 1e-7, "{:?}: {} vs {}", mode, fd, norm2);
        }
    }

    #[test]
    fn biomarker_cut_matches_sort(x in mat(5, 10), y in mat(5, 10), pct in 1.0f64..100.0) {
        let pairs = vec![(Sample::new("a", None, x.clone()).unwrap(), Sample::new("b", None, y.clone()).unwrap())];
        let got = metrics::biomarker_map(&pairs, pct).unwrap();
        let fa = metrics::fc_features(&x).unwrap();
        let fb = metrics::fc_features(&y).unwrap();
        let mut scores: Vec<f64> = fa.iter().zip(&fb).map(|(a, b)| (a - b).abs()).collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        let keep = ((pct / 100.0) * scores.len() as f64).ceil() as usize;
        let cut = scores[keep - 1];
        let expect = scores.iter().filter(|s| **s >= cut).count();
        prop_assert_eq!(got.len(), expect);
        prop_assert!(got.iter().all(|f| f.score >= cut));
        prop_assert!(got.windows(2).all(|w| w[0].score >= w[1].score));
    }

    /// Shortest round-trip formatting makes CSV I/O lossless.
    #[test]
    fn csv_roundtrip_exact(v in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 6),
                           label in prop::option::of(0usize..5)) {
        let s = Sample::new("s-1", label, Array2::from_shape_vec((2, 3), v).unwrap()).unwrap();
        let text = data::format_samples(std::slice::from_ref(&s));
        let back = data::parse_samples(&text, Path::new("mem.csv")).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(&back[0].id, &s.id);
        prop_assert_eq!(back[0].label, s.label);
        prop_assert!(back[0].values.iter().zip(&s.values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
