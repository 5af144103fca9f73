//! Least-squares and ridge models from challenge features to cropped images.
//!
//! Every fit centers the features and targets, so the intercept is
//! `ȳ - x̄ᵀβ` and never penalized. The centered design is factored once by QR
//! followed by an SVD of the small triangular factor; OLS keeps singular
//! values above `s_max · max(m, f) · ε` (minimum-norm solution), ridge applies
//! the filter `s / (s² + λ)`.

use std::borrow::Borrow;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::challenge::{quadratic_expand, quadratic_len, Challenge};
use crate::dataset::Crp;
use crate::error::{Error, Result};
use crate::formats::{self, REGRESSION_MAGIC};
use crate::gabor::{gabor_binarize, GaborKernel, KernelPreset};
use crate::image::ResponseImage;
use crate::metrics::fhd;
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Raw,
    Quadratic,
}

impl FeatureKind {
    pub fn width(self, n_bits: usize) -> usize {
        match self {
            FeatureKind::Raw => n_bits,
            FeatureKind::Quadratic => quadratic_len(n_bits),
        }
    }

    pub fn expand(self, challenge: &Challenge) -> Vec<f64> {
        match self {
            FeatureKind::Raw => challenge.to_f64(),
            FeatureKind::Quadratic => quadratic_expand(challenge.bits()),
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Raw => "raw",
            FeatureKind::Quadratic => "quadratic",
        })
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(FeatureKind::Raw),
            "quadratic" => Ok(FeatureKind::Quadratic),
            other => Err(Error::Invalid(format!("unknown feature kind '{other}'"))),
        }
    }
}

/// Training fit quality over all pixels of all samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub mse: f64,
    pub max_abs: f64,
    /// Numerical rank of the centered design.
    pub rank: usize,
}

/// Affine map from features to the pixels of a cropped image.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionModel {
    kind: FeatureKind,
    lambda: f64,
    n_bits: usize,
    height: usize,
    width: usize,
    /// Pixels × (features + 1); column 0 holds the intercepts. Its
    /// column-major storage is the row-major (features + 1) × pixels matrix.
    coef_t: DMatrix<f64>,
    /// Absent for models assembled from explicit coefficients.
    residual: Option<ResidualSummary>,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    kind: FeatureKind,
    lambda: f64,
    n_bits: usize,
    features: usize,
    height: usize,
    width: usize,
    residual: Option<ResidualSummary>,
}

const MODEL_FORMAT: &str = "puf-forge/regression";

impl RegressionModel {
    /// Builds a model from an explicit coefficient matrix with one row per
    /// feature plus a leading intercept row and one column per pixel.
    pub fn from_coefficients(
        kind: FeatureKind,
        n_bits: usize,
        height: usize,
        width: usize,
        rows: &DMatrix<f64>,
    ) -> Result<Self> {
        let f = kind.width(n_bits);
        if rows.nrows() != f + 1 {
            return Err(Error::dim("coefficient rows", f + 1, rows.nrows()));
        }
        if rows.ncols() != height * width {
            return Err(Error::dim("coefficient columns", height * width, rows.ncols()));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("regression coefficients"));
        }
        Ok(RegressionModel {
            kind,
            lambda: 0.0,
            n_bits,
            height,
            width,
            coef_t: rows.transpose(),
            residual: None,
        })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n_bits(&self) -> usize {
        self.n_bits
    }

    pub fn features(&self) -> usize {
        self.coef_t.ncols() - 1
    }

    pub fn output_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn residual(&self) -> Option<&ResidualSummary> {
        self.residual.as_ref()
    }

    pub fn intercepts(&self) -> &[f64] {
        &self.coef_t.as_slice()[..self.coef_t.nrows()]
    }

    /// Coefficients of feature `j` (0-based, excluding the intercept) for every pixel.
    pub fn slope(&self, j: usize) -> &[f64] {
        let d = self.coef_t.nrows();
        &self.coef_t.as_slice()[(j + 1) * d..(j + 2) * d]
    }

    /// Frobenius norm of all slope coefficients.
    pub fn slope_norm(&self) -> f64 {
        let d = self.coef_t.nrows();
        self.coef_t.as_slice()[d..].iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// The (features + 1) × pixels coefficient matrix, intercept row first.
    pub fn coefficients(&self) -> DMatrix<f64> {
        self.coef_t.transpose()
    }

    /// Unclamped affine prediction for each challenge, one column per challenge.
    pub fn predict_raw(&self, challenges: &[Challenge]) -> Result<DMatrix<f64>> {
        let f = self.features();
        let mut xt = DMatrix::zeros(f + 1, challenges.len());
        for (i, ch) in challenges.iter().enumerate() {
            if ch.len() != self.n_bits {
                return Err(Error::dim("challenge bits", self.n_bits, ch.len()));
            }
            let mut col = xt.column_mut(i);
            col[0] = 1.0;
            for (k, v) in self.kind.expand(ch).into_iter().enumerate() {
                col[k + 1] = v;
            }
        }
        Ok(&self.coef_t * xt)
    }

    /// Predicted cropped image with negative intensities clamped to zero.
    pub fn predict(&self, challenge: &Challenge) -> Result<ResponseImage> {
        Ok(self.predict_batch(std::slice::from_ref(challenge))?.remove(0))
    }

    pub fn predict_batch(&self, challenges: &[Challenge]) -> Result<Vec<ResponseImage>> {
        let raw = self.predict_raw(challenges)?;
        raw.column_iter()
            .map(|c| ResponseImage::from_clamped(self.height, self.width, c.iter().copied().collect()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ModelHeader {
            format: MODEL_FORMAT.into(),
            version: 1,
            kind: self.kind,
            lambda: self.lambda,
            n_bits: self.n_bits,
            features: self.features(),
            height: self.height,
            width: self.width,
            residual: self.residual,
        };
        formats::write_framed(path, REGRESSION_MAGIC, &header, self.coef_t.as_slice())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, block): (ModelHeader, Vec<f64>) = formats::read_framed(path, REGRESSION_MAGIC)?;
        let bad = |reason: String| Error::Format {
            path: path.display().to_string(),
            reason,
        };
        if h.format != MODEL_FORMAT {
            return Err(bad(format!("unexpected format '{}'", h.format)));
        }
        if h.features != h.kind.width(h.n_bits) {
            return Err(bad(format!(
                "{} features do not match {} bits of kind {}",
                h.features, h.n_bits, h.kind
            )));
        }
        let d = h.height * h.width;
        if block.len() != d * (h.features + 1) {
            return Err(bad(format!(
                "expected {} coefficients, found {}",
                d * (h.features + 1),
                block.len()
            )));
        }
        Ok(RegressionModel {
            kind: h.kind,
            lambda: h.lambda,
            n_bits: h.n_bits,
            height: h.height,
            width: h.width,
            coef_t: DMatrix::from_vec(d, h.features + 1, block),
            residual: h.residual,
        })
    }
}

/// Thin SVD `Xc = U diag(s) Vᵀ` of the centered design.
struct Decomposition {
    x_mean: DVector<f64>,
    u: DMatrix<f64>,
    s: DVector<f64>,
    v: DMatrix<f64>,
    tol: f64,
}

impl Decomposition {
    fn new(x: &DMatrix<f64>) -> Result<Self> {
        let (m, f) = x.shape();
        let x_mean = x.row_mean().transpose();
        let mut xc = x.clone();
        for mut row in xc.row_iter_mut() {
            row -= x_mean.transpose();
        }
        let (u, s, v) = if m >= f {
            let qr = xc.qr();
            let (q, r) = (qr.q(), qr.r());
            let svd = r.svd(true, true);
            let ur = svd.u.ok_or(Error::NonFinite("svd"))?;
            let vt = svd.v_t.ok_or(Error::NonFinite("svd"))?;
            (q * ur, svd.singular_values, vt.transpose())
        } else {
            let qr = xc.transpose().qr();
            let (q, r) = (qr.q(), qr.r());
            let svd = r.transpose().svd(true, true);
            let ur = svd.u.ok_or(Error::NonFinite("svd"))?;
            let wt = svd.v_t.ok_or(Error::NonFinite("svd"))?;
            (ur, svd.singular_values, q * wt.transpose())
        };
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design factorization"));
        }
        let tol = s.max() * m.max(f) as f64 * f64::EPSILON;
        Ok(Decomposition { x_mean, u, s, v, tol })
    }

    fn rank(&self) -> usize {
        self.s.iter().filter(|s| **s > self.tol).count()
    }

    /// Spectral filter: `1/s` for OLS, `s/(s²+λ)` for ridge; values below the
    /// rank tolerance are dropped in both cases.
    fn weights(&self, lambda: f64) -> DVector<f64> {
        self.s.map(|s| {
            if s <= self.tol {
                0.0
            } else if lambda == 0.0 {
                1.0 / s
            } else {
                s / (s * s + lambda)
            }
        })
    }
}

/// Design matrix (samples × features) and targets (pixels × samples).
struct Problem {
    x: DMatrix<f64>,
    yt: DMatrix<f64>,
    n_bits: usize,
    height: usize,
    width: usize,
}

impl Problem {
    fn new<C: Borrow<Crp>>(train: &[C], kind: FeatureKind) -> Result<Self> {
        let first = train
            .first()
            .map(Borrow::borrow)
            .ok_or_else(|| Error::Invalid("need at least one training CRP".into()))?;
        let n_bits = first.challenge.len();
        let (height, width) = (first.cropped.height(), first.cropped.width());
        let f = kind.width(n_bits);
        let d = height * width;
        let mut x = DMatrix::zeros(train.len(), f);
        let mut yt = DMatrix::zeros(d, train.len());
        for (i, crp) in train.iter().map(Borrow::borrow).enumerate() {
            if crp.challenge.len() != n_bits {
                return Err(Error::dim("challenge bits", n_bits, crp.challenge.len()));
            }
            if crp.cropped.len() != d {
                return Err(Error::dim("target pixels", d, crp.cropped.len()));
            }
            for (k, v) in kind.expand(&crp.challenge).into_iter().enumerate() {
                x[(i, k)] = v;
            }
            yt.column_mut(i).copy_from_slice(crp.cropped.pixels());
        }
        Ok(Problem {
            x,
            yt,
            n_bits,
            height,
            width,
        })
    }
}

/// Centered targets projected on the left singular vectors: `(Y - ȳ)ᵀ U`
/// stored pixels × rank, plus the target means.
fn project_targets(yt: &DMatrix<f64>, dec: &Decomposition) -> (DMatrix<f64>, DVector<f64>) {
    let y_mean = yt.column_mean();
    let mut yct = yt.clone();
    for mut col in yct.column_iter_mut() {
        col -= &y_mean;
    }
    (yct * &dec.u, y_mean)
}

fn assemble(ct: &DMatrix<f64>, y_mean: &DVector<f64>, dec: &Decomposition, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = ct.clone();
    for (mut col, wk) in scaled.column_iter_mut().zip(w.iter()) {
        col *= *wk;
    }
    let slopes_t = scaled * dec.v.transpose();
    let intercept = y_mean - &slopes_t * &dec.x_mean;
    let (d, f) = slopes_t.shape();
    let mut coef_t = DMatrix::zeros(d, f + 1);
    coef_t.column_mut(0).copy_from(&intercept);
    coef_t.columns_mut(1, f).copy_from(&slopes_t);
    coef_t
}

fn fit<C: Borrow<Crp>>(train: &[C], kind: FeatureKind, lambda: f64) -> Result<RegressionModel> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Invalid(format!("ridge lambda must be finite and >= 0, got {lambda}")));
    }
    let p = Problem::new(train, kind)?;
    let dec = Decomposition::new(&p.x)?;
    let (ct, y_mean) = project_targets(&p.yt, &dec);
    let coef_t = assemble(&ct, &y_mean, &dec, &dec.weights(lambda));
    if coef_t.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression fit"));
    }
    let mut model = RegressionModel {
        kind,
        lambda,
        n_bits: p.n_bits,
        height: p.height,
        width: p.width,
        coef_t,
        residual: None,
    };
    let challenges: Vec<Challenge> = train.iter().map(|c| c.borrow().challenge.clone()).collect();
    let fitted = model.predict_raw(&challenges)?;
    let resid = fitted - &p.yt;
    model.residual = Some(ResidualSummary {
        mse: resid.norm_squared() / resid.len() as f64,
        max_abs: resid.amax(),
        rank: dec.rank(),
    });
    Ok(model)
}

/// Ordinary least squares with intercept; minimum-norm on rank deficiency.
pub fn fit_ols<C: Borrow<Crp>>(train: &[C], kind: FeatureKind) -> Result<RegressionModel> {
    fit(train, kind, 0.0)
}

/// Ridge regression with an unpenalized intercept. `lambda = 0` is OLS.
pub fn fit_ridge<C: Borrow<Crp>>(train: &[C], kind: FeatureKind, lambda: f64) -> Result<RegressionModel> {
    if lambda < 0.0 {
        return Err(Error::Invalid(format!("ridge lambda must be >= 0, got {lambda}")));
    }
    fit(train, kind, lambda)
}

/// 0 followed by 13 log-spaced values from 1e-6 to 1e4.
pub fn default_lambda_grid() -> Vec<f64> {
    std::iter::once(0.0)
        .chain((0..13).map(|k| 10f64.powf(-6.0 + 10.0 * k as f64 / 12.0)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    /// Validation mean FHD (kernel G1) for each grid value, in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Validation FHD gain a later grid value needs over the current choice.
pub const SELECTION_TOLERANCE: f64 = 1e-4;

/// Picks the grid value with the lowest validation mean FHD under G1 on a
/// seeded 90/10 split of `train`. Scanning in grid order, a value replaces
/// the current choice only if it scores lower by more than
/// [`SELECTION_TOLERANCE`].
pub fn select_lambda<C: Borrow<Crp>>(
    train: &[C], kind: FeatureKind, grid: &[f64],
    seed: u64,
) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::Invalid("lambda grid is empty".into()));
    }
    if let Some(l) = grid.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(Error::Invalid(format!("invalid lambda {l} in grid")));
    }
    if grid.len() == 1 {
        return Ok(LambdaSelection {
            lambda: grid[0],
            scores: vec![(grid[0], f64::NAN)],
        });
    }
    if train.len() < 2 {
        return Err(Error::Invalid("lambda selection needs at least two CRPs".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng::stream(seed, tag::SPLIT, 1));
    }
    let n_val = (train.len() / 10).max(1);
    let (val_idx, fit_idx) = order.split_at(n_val);
    let fit_set: Vec<&Crp> = fit_idx.iter().map(|&i| train[i].borrow()).collect();
    let val_set: Vec<&Crp> = val_idx.iter().map(|&i| train[i].borrow()).collect();

    let p = Problem::new(&fit_set, kind)?;
    let dec = Decomposition::new(&p.x)?;
    let (ct, y_mean) = project_targets(&p.yt, &dec);

    // validation features projected on V: (Xv - x̄) V, stored rank × val
    let mut xv = DMatrix::zeros(dec.x_mean.len(), val_set.len());
    for (i, crp) in val_set.iter().enumerate() {
        if crp.challenge.len() != p.n_bits {
            return Err(Error::dim("challenge bits", p.n_bits, crp.challenge.len()));
        }
        let feats = DVector::from_vec(kind.expand(&crp.challenge));
        xv.column_mut(i).copy_from(&(feats - &dec.x_mean));
    }
    let proj = dec.v.transpose() * xv;

    let kernel = GaborKernel::preset(KernelPreset::G1);
    let truth = val_set
        .par_iter()
        .map(|c| c.bits_for(KernelPreset::G1, &kernel))
        .collect::<Result<Vec<_>>>()?;

    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let mut wp = proj.clone();
        for (mut row, wk) in wp.row_iter_mut().zip(dec.weights(lambda).iter()) {
            row *= *wk;
        }
        let mut pred = &ct * wp;
        for mut col in pred.column_iter_mut() {
            col += &y_mean;
        }
        let dists = pred
            .column_iter()
            .zip(&truth)
            .par_bridge()
            .map(|(col, t)| {
                let img = ResponseImage::from_clamped(p.height, p.width, col.iter().copied().collect())?;
                fhd(&gabor_binarize(&img, &kernel)?, t)
            })
            .collect::<Result<Vec<f64>>>()?;
        scores.push((lambda, dists.iter().sum::<f64>() / dists.len() as f64));
    }
    let best = scores
        .iter()
        .enumerate()
        .fold(0, |b, (i, s)| if s.1 < scores[b].1 - SELECTION_TOLERANCE { i } else { b });
    Ok(LambdaSelection {
        lambda: scores[best].0,
        scores,
    })
}

/// Spreads each raw-feature slope evenly over the `factor²` sub-blocks that
/// [`crate::challenge::split_blocks`] creates from it. The intercepts stay.
pub fn split_coefficients(model: &RegressionModel, factor: usize) -> Result<RegressionModel> {
    if model.kind != FeatureKind::Raw {
        return Err(Error::Invalid("coefficient splitting needs a raw-feature model".into()));
    }
    if factor == 0 {
        return Err(Error::Config("split factor must be >= 1".into()));
    }
    let l = (model.n_bits as f64).sqrt().round() as usize;
    if l * l != model.n_bits {
        return Err(Error::Invalid("model input is not a square grid".into()));
    }
    let fine = l * factor;
    let d = model.coef_t.nrows();
    let share = 1.0 / (factor * factor) as f64;
    let mut coef_t = DMatrix::zeros(d, fine * fine + 1);
    coef_t.column_mut(0).copy_from(&model.coef_t.column(0));
    for r in 0..fine {
        for c in 0..fine {
            let src = (r / factor) * l + c / factor;
            let dst = r * fine + c;
            coef_t
                .column_mut(dst + 1)
                .copy_from(&(model.coef_t.column(src + 1) * share));
        }
    }
    Ok(RegressionModel {
        n_bits: fine * fine,
        coef_t,
        ..model.clone()
    })
}
