use proptest::prelude::*;
use puf_forge::metrics::{
    boxplot_stats, crossover_threshold, dataset_fhd, fhd, misclassified, pearson, shannon_entropy, ssim,
};
use puf_forge::{BitResponse, ResponseImage};

fn bitstring(len: usize) -> impl Strategy<Value = BitResponse> {
    prop::collection::vec(any::<bool>(), len).prop_map(move |b| BitResponse::from_bits(1, len, &b).unwrap())
}

fn image(side: usize) -> impl Strategy<Value = ResponseImage> {
    prop::collection::vec(0.0f64..1.0, side * side).prop_map(move |v| ResponseImage::new(side, side, v).unwrap())
}

/// Thresholds at every gap midpoint plus one beyond each end; returns the
/// error of the best one and the bounds of the first optimal run.
fn exhaustive(like: &[f64], unlike: &[f64]) -> (usize, f64) {
    let mut v: Vec<f64> = like.iter().chain(unlike).copied().collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    let pad = if v[v.len() - 1] > v[0] { v[v.len() - 1] - v[0] } else { 1.0 };
    let mut cands = vec![v[0] - pad];
    cands.extend(v.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cands.push(v[v.len() - 1] + pad);
    let errs: Vec<usize> = cands.iter().map(|t| misclassified(like, unlike, *t)).collect();
    let best = *errs.iter().min().unwrap();
    let s = errs.iter().position(|e| *e == best).unwrap();
    let mut e = s;
    while e + 1 < errs.len() && errs[e + 1] == best {
        e += 1;
    }
    let lo = if s == 0 { v[0] - pad } else { v[s - 1] };
    let hi = if e == errs.len() - 1 { v[v.len() - 1] + pad } else { v[e] };
    (best, 0.5 * (lo + hi))
}

#[test]
fn uniform_random_bitstrings_average_one_half() {
    use rand::Rng;
    let mut rng = puf_forge::rng::stream(5, 0, 0);
    let rs: Vec<BitResponse> = (0..300)
        .map(|_| {
            let b: Vec<bool> = (0..16384).map(|_| rng.random()).collect();
            BitResponse::from_bits(128, 128, &b).unwrap()
        })
        .collect();
    let m = dataset_fhd(&rs, 300, 1).unwrap();
    assert_eq!(m.values.len(), 300 * 299 / 2);
    assert!((0.497..=0.503).contains(&m.summary.mean), "{}", m.summary.mean);
    assert_eq!(m, dataset_fhd(&rs, 300, 1).unwrap());
}

#[test]
fn whiskers_on_adversarial_inputs() {
    let cases: Vec<Vec<f64>> = vec![
        vec![1.0; 7],
        vec![0.0, 0.0, 0.0, 1e9],
        vec![-1e9, 5.0, 5.0, 5.0, 5.0],
        (1..=9).map(f64::from).chain([100.0]).collect(),
        vec![2.0, 1.0],
        vec![3.5],
        vec![0.0, 0.0, 10.0, 10.0, 10.0, 10.0, 20.0, 20.0],
    ];
    for vals in cases {
        check_whiskers(&vals);
    }
}

fn check_whiskers(vals: &[f64]) {
    let b = boxplot_stats(vals).unwrap();
    let (lo, hi) = (b.q1 - 1.5 * b.iqr(), b.q3 + 1.5 * b.iqr());
    let inside: Vec<f64> = vals.iter().copied().filter(|v| *v >= lo && *v <= hi).collect();
    let min_in = inside.iter().copied().fold(f64::INFINITY, f64::min);
    let max_in = inside.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(b.whisker_low, min_in, "{vals:?}");
    assert_eq!(b.whisker_high, max_in, "{vals:?}");
    let mut out: Vec<f64> = vals.iter().copied().filter(|v| *v < lo || *v > hi).collect();
    let mut got = b.outliers.clone();
    out.sort_by(f64::total_cmp);
    got.sort_by(f64::total_cmp);
    assert_eq!(got, out, "{vals:?}");
}

#[test]
fn crossover_with_clean_gap_is_the_midpoint() {
    let like = [0.01, 0.05, 0.1, 0.12];
    let unlike = [0.4, 0.45, 0.5];
    assert!((crossover_threshold(&like, &unlike).unwrap() - 0.26).abs() < 1e-15);
    assert_eq!(crossover_threshold(&[0.0; 5], &[0.5; 5]).unwrap(), 0.25);
}

#[test]
fn crossover_on_like_equals_unlike_is_finite() {
    use rand::Rng;
    let mut rng = puf_forge::rng::stream(2, 0, 0);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| (0..200).map(|_| rng.random::<f64>()).collect::<Vec<_>>();
    let (mut a, mut b) = (draw(&mut rng), draw(&mut rng));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    if mean(&a) > mean(&b) {
        std::mem::swap(&mut a, &mut b);
    }
    let t = crossover_threshold(&a, &b).unwrap();
    assert!(t.is_finite());
    let rate = misclassified(&a, &b, t) as f64 / 400.0;
    assert!(rate <= 0.5 + 1e-12);
    assert!(crossover_threshold(&b, &a).is_err());
}

proptest! {
    #[test]
    fn fhd_is_a_metric(a in bitstring(200), b in bitstring(200), c in bitstring(200)) {
        let (ab, bc, ac) = (fhd(&a, &b).unwrap(), fhd(&b, &c).unwrap(), fhd(&a, &c).unwrap());
        prop_assert_eq!(fhd(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(ab, fhd(&b, &a).unwrap());
        prop_assert!(ac <= ab + bc + 1e-15);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn pearson_ignores_positive_affine_maps(x in image(4), y in image(4), s in 0.1f64..10.0, o in -5.0f64..5.0) {
        let Ok(r) = pearson(x.pixels(), y.pixels()) else { return Ok(()) };
        let xs: Vec<f64> = x.pixels().iter().map(|v| s * v + o).collect();
        prop_assert!((pearson(&xs, y.pixels()).unwrap() - r).abs() < 1e-9);
        prop_assert!((pearson(y.pixels(), x.pixels()).unwrap() - r).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
    }

    #[test]
    fn ssim_identity_and_symmetry(x in image(12), y in image(12)) {
        let (x, y) = (x.to_unit_max(), y.to_unit_max());
        prop_assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn ssim_drops_when_one_window_is_inverted(x in image(16)) {
        let x = x.to_unit_max();
        let mut px = x.pixels().to_vec();
        let before = px.clone();
        for r in 4..12 {
            for c in 4..12 {
                px[r * 16 + c] = 1.0 - px[r * 16 + c];
            }
        }
        prop_assume!(px != before);
        let y = ResponseImage::new(16, 16, px).unwrap();
        prop_assert!(ssim(&x, &y).unwrap() < 1.0);
    }

    #[test]
    fn entropy_is_bounded_by_bit_depth(x in image(8), bits in 1u32..=8) {
        let h = shannon_entropy(&x, bits).unwrap();
        prop_assert!(h >= 0.0 && h <= bits as f64 + 1e-12);
    }

    #[test]
    fn crossover_matches_exhaustive_scan(
        like in prop::collection::vec(0.0f64..0.6, 1..30),
        unlike in prop::collection::vec(0.3f64..1.0, 1..30),
    ) {
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        prop_assume!(mean(&like) < mean(&unlike));
        let t = crossover_threshold(&like, &unlike).unwrap();
        let (best, mid) = exhaustive(&like, &unlike);
        prop_assert_eq!(misclassified(&like, &unlike, t), best);
        prop_assert_eq!(t, mid);
    }

    #[test]
    fn boxplot_whiskers_obey_the_iqr_rule(vals in prop::collection::vec(-100.0f64..100.0, 1..50)) {
        check_whiskers(&vals);
    }
}
