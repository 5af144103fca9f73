//! Similarity and summary statistics for responses and attack outcomes.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gabor::BitResponse;
use crate::image::ResponseImage;
use crate::rng;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const DEFAULT_FHD_SAMPLE: usize = 300;

/// Fractional Hamming distance: differing bits divided by length.
pub fn fhd(a: &BitResponse, b: &BitResponse) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("bit response length", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::Invalid("cannot compare empty bit responses".into()));
    }
    let diff: u32 = a
        .words()
        .iter()
        .zip(b.words())
        .map(|(x, y)| (x ^ y).count_ones())
        .sum();
    Ok(diff as f64 / a.len() as f64)
}

/// Per-item values with labels and their summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub labels: Vec<String>,
    pub values: Vec<f64>,
    pub summary: Summary,
}

impl MetricsReport {
    pub fn new(labels: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if labels.len() != values.len() {
            return Err(Error::dim("report labels", values.len(), labels.len()));
        }
        let summary = Summary::of(&values)?;
        Ok(MetricsReport {
            labels,
            values,
            summary,
        })
    }
}

/// Pairwise FHD over a random subset of `min(sample_size, count)` responses.
/// Labels name the original indices of each pair as `i-j`.
pub fn dataset_fhd(responses: &[BitResponse], sample_size: usize, seed: u64) -> Result<MetricsReport> {
    if responses.len() < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 responses for pairwise FHD, got {}",
            responses.len()
        )));
    }
    let take = sample_size.min(responses.len());
    if take < 2 {
        return Err(Error::Invalid("sample size must be at least 2".into()));
    }
    let mut rng = rng::stream(seed, rng::tag::SAMPLE, 0);
    let mut chosen = index::sample(&mut rng, responses.len(), take).into_vec();
    chosen.sort_unstable();
    let pairs: Vec<(usize, usize)> = (0..take)
        .flat_map(|a| (a + 1..take).map(move |b| (a, b)))
        .map(|(a, b)| (chosen[a], chosen[b]))
        .collect();
    let values = pairs
        .par_iter()
        .map(|&(i, j)| fhd(&responses[i], &responses[j]))
        .collect::<Result<Vec<f64>>>()?;
    let labels = pairs.iter().map(|(i, j)| format!("{i}-{j}")).collect();
    MetricsReport::new(labels, values)
}

/// Shannon entropy in bits of the unit-max normalized image quantized into
/// `2^bits` uniform bins.
pub fn shannon_entropy(img: &ResponseImage, bits: u32) -> Result<f64> {
    if !(1..=16).contains(&bits) {
        return Err(Error::Invalid(format!("entropy bit depth {bits} outside 1..=16")));
    }
    let bins = 1usize << bits;
    let norm = img.to_unit_max();
    let mut counts = vec![0usize; bins];
    for v in norm.pixels() {
        counts[((v * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let total = img.len() as f64;
    Ok(counts
        .iter()
        .filter(|c| **c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Sample Pearson correlation of two equally long sequences.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("pearson input length", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::Invalid("pearson needs at least two values".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Invalid("pearson correlation undefined for constant input".into()));
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    if !r.is_finite() {
        return Err(Error::NonFinite("pearson"));
    }
    Ok(r.clamp(-1.0, 1.0))
}

/// Mean SSIM over all 8×8 windows (stride 1) with dynamic range 1.
pub fn ssim(x: &ResponseImage, y: &ResponseImage) -> Result<f64> {
    if x.height() != y.height() || x.width() != y.width() {
        return Err(Error::Invalid(format!(
            "ssim needs equal shapes, got {}x{} and {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    let w = SSIM_WINDOW;
    if x.height() < w || x.width() < w {
        return Err(Error::Config(format!(
            "ssim window {w}x{w} larger than image {}x{}",
            x.height(),
            x.width()
        )));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = (w * w) as f64;
    let rows = x.height() - w + 1;
    let cols = x.width() - w + 1;
    let local: Vec<f64> = (0..rows)
        .into_par_iter()
        .map(|r0| {
            let mut row_sum = 0.0;
            for c0 in 0..cols {
                let (mut sx, mut sy) = (0.0, 0.0);
                for r in r0..r0 + w {
                    sx += x.row(r)[c0..c0 + w].iter().sum::<f64>();
                    sy += y.row(r)[c0..c0 + w].iter().sum::<f64>();
                }
                let (mx, my) = (sx / n, sy / n);
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for r in r0..r0 + w {
                    for (a, b) in x.row(r)[c0..c0 + w].iter().zip(&y.row(r)[c0..c0 + w]) {
                        let (da, db) = (a - mx, b - my);
                        vx += da * da;
                        vy += db * db;
                        cxy += da * db;
                    }
                }
                let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
                row_sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
            row_sum
        })
        .collect();
    Ok(local.iter().sum::<f64>() / (rows * cols) as f64)
}

/// Tukey boxplot with linear-interpolation quartiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxplotStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

impl BoxplotStats {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn boxplot_stats(values: &[f64]) -> Result<BoxplotStats> {
    if values.is_empty() {
        return Err(Error::Invalid("boxplot of an empty sample".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("boxplot input"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let reach = 1.5 * (q3 - q1);
    let (lo_fence, hi_fence) = (q1 - reach, q3 + reach);
    let inside = sorted.iter().filter(|v| (lo_fence..=hi_fence).contains(*v));
    let whisker_low = inside.clone().copied().fold(f64::INFINITY, f64::min);
    let whisker_high = inside.copied().fold(f64::NEG_INFINITY, f64::max);
    let outliers = sorted
        .iter()
        .copied()
        .filter(|v| *v < lo_fence || *v > hi_fence)
        .collect();
    Ok(BoxplotStats {
        median: quantile_sorted(&sorted, 0.5),
        q1,
        q3,
        whisker_low,
        whisker_high,
        outliers,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub min: f64,
    pub max: f64,
    pub boxplot: BoxplotStats,
}

impl Summary {
    /// Population statistics plus the boxplot of `values`.
    pub fn of(values: &[f64]) -> Result<Summary> {
        let boxplot = boxplot_stats(values)?;
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Summary {
            count: values.len(),
            mean,
            std_dev: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            boxplot,
        })
    }
}

/// Number of misclassified pairs at threshold `t`: like pairs above it plus
/// unlike pairs at or below it.
pub fn misclassified(like: &[f64], unlike: &[f64], t: f64) -> usize {
    like.iter().filter(|v| **v > t).count() + unlike.iter().filter(|v| **v <= t).count()
}

/// Threshold minimizing [`misclassified`]. The error is constant between
/// consecutive distinct sample values; the first optimal run of intervals is
/// taken and its midpoint returned. Unbounded end intervals are closed one
/// data range beyond the extreme values.
pub fn crossover_threshold(like: &[f64], unlike: &[f64]) -> Result<f64> {
    if like.is_empty() || unlike.is_empty() {
        return Err(Error::Invalid("crossover needs nonempty like and unlike samples".into()));
    }
    if like.iter().chain(unlike).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("crossover input"));
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    if mean(like) >= mean(unlike) {
        return Err(Error::Invalid(
            "like distances must have a smaller mean than unlike distances".into(),
        ));
    }
    let mut tagged: Vec<(f64, bool)> = like
        .iter()
        .map(|v| (*v, true))
        .chain(unlike.iter().map(|v| (*v, false)))
        .collect();
    tagged.sort_by(|a, b| a.0.total_cmp(&b.0));

    // interval k covers [v_{k-1}, v_k) with v_{-1} = -inf and v_m = +inf
    let mut values = Vec::new();
    let mut errors = vec![like.len()];
    let mut err = like.len() as i64;
    let mut i = 0;
    while i < tagged.len() {
        let v = tagged[i].0;
        while i < tagged.len() && tagged[i].0 == v {
            err += if tagged[i].1 { -1 } else { 1 };
            i += 1;
        }
        values.push(v);
        errors.push(err as usize);
    }
    let best = *errors.iter().min().expect("nonempty");
    let start = errors.iter().position(|e| *e == best).expect("present");
    let end = start + errors[start..].iter().take_while(|e| **e == best).count();

    let range = values[values.len() - 1] - values[0];
    let pad = if range > 0.0 { range } else { 1.0 };
    let lower = if start == 0 { values[0] - pad } else { values[start - 1] };
    let upper = if end == errors.len() {
        values[values.len() - 1] + pad
    } else {
        values[end - 1]
    };
    Ok(0.5 * (lower + upper))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(s: &str) -> BitResponse {
        let b: Vec<bool> = s.chars().map(|c| c == '1').collect();
        BitResponse::from_bits(1, b.len(), &b).unwrap()
    }

    #[test]
    fn fhd_examples() {
        let a = bits("0101");
        assert_eq!(fhd(&a, &a).unwrap(), 0.0);
        assert_eq!(fhd(&a, &a.complement()).unwrap(), 1.0);
        assert_eq!(fhd(&a, &bits("0111")).unwrap(), 0.25);
        assert!(fhd(&a, &bits("01")).is_err());
    }

    #[test]
    fn dataset_fhd_identical_and_pair_counts() {
        let a = bits("0110101");
        let r = dataset_fhd(&[a.clone(), a.clone(), a.clone()], 300, 1).unwrap();
        assert_eq!(r.values.len(), 3);
        assert_eq!(r.summary.mean, 0.0);
        let r = dataset_fhd(&[a.clone(), a.complement()], 2, 1).unwrap();
        assert_eq!(r.values, vec![1.0]);
        assert!(dataset_fhd(&[a], 300, 1).is_err());
    }

    #[test]
    fn dataset_fhd_samples_without_replacement() {
        let rs: Vec<BitResponse> = (0..20)
            .map(|i| {
                let b: Vec<bool> = (0..64).map(|k| (k * (i + 3)) % 5 == 0).collect();
                BitResponse::from_bits(8, 8, &b).unwrap()
            })
            .collect();
        let r = dataset_fhd(&rs, 6, 9).unwrap();
        assert_eq!(r.values.len(), 15);
        assert_eq!(r, dataset_fhd(&rs, 6, 9).unwrap());
    }

    #[test]
    fn entropy_examples() {
        let c = ResponseImage::new(4, 4, vec![0.3; 16]).unwrap();
        assert_eq!(shannon_entropy(&c, 8).unwrap(), 0.0);
        let cycle = ResponseImage::new(16, 16, (0..256).map(|k| k as f64 / 255.0).collect()).unwrap();
        assert!((shannon_entropy(&cycle, 8).unwrap() - 8.0).abs() < 1e-12);
        let half = ResponseImage::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((shannon_entropy(&half, 8).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 3.0, 2.0, 7.0];
        let y: Vec<f64> = x.iter().map(|v| 10.0 - v).collect();
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&x, &[2.0; 4]).is_err());
        assert!(pearson(&x, &[1.0]).is_err());
    }

    #[test]
    fn ssim_identity_and_window_error() {
        let x = ResponseImage::new(16, 16, (0..256).map(|k| ((k * 37) % 101) as f64 / 100.0).collect()).unwrap();
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let small = ResponseImage::zeros(7, 7);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn boxplot_examples() {
        let b = boxplot_stats(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!((b.median, b.q1, b.q3), (3.0, 2.0, 4.0));
        let flat = boxplot_stats(&[2.5; 6]).unwrap();
        assert_eq!(flat.iqr(), 0.0);
        assert!(flat.outliers.is_empty());
        let mut v: Vec<f64> = (1..=9).map(f64::from).collect();
        v.push(100.0);
        let b = boxplot_stats(&v).unwrap();
        // Q1 = 3.25, Q3 = 7.75, upper fence 14.5
        assert_eq!((b.q1, b.q3), (3.25, 7.75));
        assert_eq!(b.outliers, vec![100.0]);
        assert_eq!((b.whisker_low, b.whisker_high), (1.0, 9.0));
    }

    #[test]
    fn crossover_gap_midpoint() {
        assert_eq!(crossover_threshold(&[0.0; 5], &[0.5; 7]).unwrap(), 0.25);
        assert!(crossover_threshold(&[0.5], &[0.0]).is_err());
        assert!(crossover_threshold(&[], &[0.0]).is_err());
    }
}
