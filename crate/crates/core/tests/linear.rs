use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use puf_forge::challenge::{generate, split_blocks};
use puf_forge::experiment::run_attack;
use puf_forge::linear::{fit_ols, fit_ridge, select_lambda, split_coefficients, SELECTION_TOLERANCE};
use puf_forge::{
    AttackKind, AttackOptions, Challenge, Crp, Dataset, DatasetSpec, FeatureKind, KernelPreset, PufConfig,
    RegressionModel, ResponseImage, SchemeType,
};

fn dataset(l: usize, image: usize, crop: usize, count: usize, kernels: Vec<KernelPreset>) -> Dataset {
    let puf = PufConfig {
        grid_side: l,
        image_side: image,
        crop_side: crop,
        seed: 21,
        ..PufConfig::default()
    };
    let mut spec = DatasetSpec::new(puf, SchemeType::A, count, 4);
    spec.kernels = kernels;
    Dataset::generate(&spec).unwrap()
}

fn augmented(crps: &[&Crp], kind: FeatureKind) -> (DMatrix<f64>, DMatrix<f64>) {
    let f = kind.width(crps[0].challenge.len());
    let d = crps[0].cropped.len();
    let x = DMatrix::from_fn(crps.len(), f + 1, |i, k| {
        if k == 0 {
            1.0
        } else {
            kind.expand(&crps[i].challenge)[k - 1]
        }
    });
    let y = DMatrix::from_fn(crps.len(), d, |i, p| crps[i].cropped.pixels()[p]);
    (x, y)
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

#[test]
fn ols_matches_normal_equations_when_overdetermined() {
    let ds = dataset(3, 32, 8, 80, vec![]);
    let crps: Vec<&Crp> = ds.crps.iter().collect();
    let model = fit_ols(&crps, FeatureKind::Raw).unwrap();
    let (x, y) = augmented(&crps, FeatureKind::Raw);
    let xtx = x.transpose() * &x;
    let beta = xtx.lu().solve(&(x.transpose() * &y)).expect("full rank");
    let diff = max_abs(&(model.coefficients() - &beta));
    assert!(diff <= 1e-8 * max_abs(&beta), "{diff}");
}

#[test]
fn known_affine_map_is_recovered_from_n_plus_one_samples() {
    let n = 9;
    let truth = DMatrix::from_fn(n + 1, 3, |r, c| ((r * 7 + c * 3) % 11) as f64 * 0.25 + 1.0);
    let mut bits = vec![vec![false; n]];
    bits.extend((0..n).map(|j| (0..n).map(|k| k == j).collect()));
    let crps: Vec<Crp> = bits
        .into_iter()
        .map(|b| {
            let ch = Challenge::from_bits(b).unwrap();
            let mut x = vec![1.0];
            x.extend(ch.to_f64());
            let y = (DVector::from_vec(x).transpose() * &truth).transpose();
            Crp::new(ch, ResponseImage::new(1, 3, y.iter().copied().collect()).unwrap())
        })
        .collect();
    let model = fit_ols(&crps, FeatureKind::Raw).unwrap();
    assert!(max_abs(&(model.coefficients() - &truth)) < 1e-8);
}

#[test]
fn residuals_are_orthogonal_to_every_feature() {
    let ds = dataset(3, 32, 8, 30, vec![]);
    let crps: Vec<&Crp> = ds.crps.iter().collect();
    for kind in [FeatureKind::Raw, FeatureKind::Quadratic] {
        let model = fit_ols(&crps, kind).unwrap();
        let (x, y) = augmented(&crps, kind);
        let resid = &y - &x * model.coefficients();
        let inner = x.transpose() * &resid;
        let scale = x.norm() * y.norm();
        assert!(max_abs(&inner) < 1e-6 * scale, "{kind}: {}", max_abs(&inner) / scale);
    }
}

#[test]
fn ridge_shrinks_monotonically_and_vanishes_for_huge_lambda() {
    let ds = dataset(5, 32, 8, 40, vec![]);
    let crps: Vec<&Crp> = ds.crps.iter().collect();
    let lambdas = [0.0, 1e-4, 1e-2, 1.0, 10.0, 1e3, 1e6];
    let norms: Vec<f64> = lambdas
        .iter()
        .map(|&l| fit_ridge(&crps, FeatureKind::Raw, l).unwrap().slope_norm())
        .collect();
    for w in norms.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12), "{norms:?}");
    }
    let huge = fit_ridge(&crps, FeatureKind::Raw, 1e14).unwrap();
    assert!(huge.slope_norm() < 1e-9 * norms[0]);
    // without slopes the intercept is the target mean
    let mean0 = crps.iter().map(|c| c.cropped.pixels()[0]).sum::<f64>() / crps.len() as f64;
    assert!((huge.intercepts()[0] - mean0).abs() < 1e-9 * mean0.abs().max(1.0));
}

#[test]
fn zero_lambda_ridge_is_ols() {
    let ds = dataset(5, 32, 8, 60, vec![]);
    let crps: Vec<&Crp> = ds.crps.iter().collect();
    for kind in [FeatureKind::Raw, FeatureKind::Quadratic] {
        let a = fit_ols(&crps, kind).unwrap();
        let b = fit_ridge(&crps, kind, 0.0).unwrap();
        let chs = generate(5, SchemeType::A, 20, 99).unwrap();
        let d = a.predict_raw(&chs).unwrap() - b.predict_raw(&chs).unwrap();
        assert!(max_abs(&d) < 1e-8);
    }
}

#[test]
fn quadratic_features_fit_simulator_data_exactly() {
    // 3x3 grid: 45 quadratic features, plenty of samples
    let ds = dataset(3, 128, 64, 120, KernelPreset::ALL.to_vec());
    let model = fit_ols(&ds.train(), FeatureKind::Quadratic).unwrap();
    let ms: f64 = ds.train().iter().flat_map(|c| c.cropped.pixels()).map(|v| v * v).sum::<f64>()
        / (ds.train().len() * 64 * 64) as f64;
    let r = model.residual().unwrap();
    assert!(r.mse < 1e-16 * ms, "relative training MSE {}", r.mse / ms);
    assert_eq!(r.rank, 45);

    let out = run_attack(&ds, &AttackOptions::new(AttackKind::Qlr)).unwrap();
    for row in &out.report.rows {
        assert!(row.fhd.values().all(|f| *f == 0.0), "CRP {}: {:?}", row.index, row.fhd);
    }
}

#[test]
fn lambda_selection_is_seeded_and_prefers_small_penalties_when_exact() {
    let ds = dataset(3, 128, 64, 120, vec![KernelPreset::G1]);
    let train = ds.train();
    let grid = [1e-6, 1e-2, 1e4];
    let a = select_lambda(&train, FeatureKind::Quadratic, &grid, 3).unwrap();
    let b = select_lambda(&train, FeatureKind::Quadratic, &grid, 3).unwrap();
    assert_eq!(a, b);
    let score = |l: f64| a.scores.iter().find(|s| s.0 == l).unwrap().1;
    assert!(score(a.lambda) <= score(1e4));
    assert!(a.scores.iter().all(|s| score(a.lambda) <= s.1 + SELECTION_TOLERANCE));
    assert!(a.lambda == grid[0] || score(a.lambda) < score(grid[0]) - SELECTION_TOLERANCE);
    assert_eq!(select_lambda(&train, FeatureKind::Quadratic, &[0.0], 3).unwrap().lambda, 0.0);
}

#[test]
fn split_model_reproduces_predictions_on_a_fitted_model() {
    let ds = dataset(5, 32, 8, 60, vec![]);
    let model = fit_ols(&ds.train(), FeatureKind::Raw).unwrap();
    let chs = generate(5, SchemeType::A, 30, 8).unwrap();
    let base = model.predict_raw(&chs).unwrap();
    for factor in [1, 2, 3] {
        let split = split_coefficients(&model, factor).unwrap();
        let fine: Vec<Challenge> = chs.iter().map(|c| split_blocks(c, factor).unwrap()).collect();
        let d = split.predict_raw(&fine).unwrap() - &base;
        assert!(max_abs(&d) < 1e-10, "factor {factor}");
    }
}

proptest! {
    #[test]
    fn split_preserves_slope_sums_and_predictions(
        coefs in prop::collection::vec(-10.0f64..10.0, 10 * 4),
        bits in prop::collection::vec(any::<bool>(), 9),
        factor in 1usize..5,
    ) {
        let m = RegressionModel::from_coefficients(FeatureKind::Raw, 9, 2, 2, &DMatrix::from_row_slice(10, 4, &coefs)).unwrap();
        let s = split_coefficients(&m, factor).unwrap();
        let ch = Challenge::new(3, bits).unwrap();
        let a = m.predict_raw(std::slice::from_ref(&ch)).unwrap();
        let b = s.predict_raw(&[split_blocks(&ch, factor).unwrap()]).unwrap();
        prop_assert!(max_abs(&(a - b)) < 1e-10);
        let fine = 3 * factor;
        for j in 0..9 {
            let (r, c) = (j / 3, j % 3);
            for p in 0..4 {
                let mut sum = 0.0;
                for fr in r * factor..(r + 1) * factor {
                    for fc in c * factor..(c + 1) * factor {
                        sum += s.slope(fr * fine + fc)[p];
                    }
                }
                prop_assert!((sum - m.slope(j)[p]).abs() < 1e-12);
            }
        }
    }
}
