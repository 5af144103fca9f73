//! Linear-scattering PUF with intensity readout.
//!
//! Each challenge block `j` owns a fixed complex field pattern `T_j` on the
//! `p`×`p` sensor. A challenge `b` produces the field `E = Σ_j b_j T_j` and the
//! camera records `I = |E|²`, which makes every pixel a quadratic form in the
//! challenge bits.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::challenge::Challenge;
use crate::error::{Error, Result};
use crate::image::{crop_offset, ResponseImage};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PufConfig {
    /// Blocks per row of the challenge mask (odd, >= 3).
    pub grid_side: usize,
    /// Pixels per side of the full response.
    pub image_side: usize,
    /// Pixels per side of the centered crop used for evaluation.
    pub crop_side: usize,
    /// Standard deviation, in pixels, of the Gaussian applied to each field
    /// pattern. Sets the speckle grain.
    pub speckle_smoothing: f64,
    /// 1 for the base geometry, 2 for the enlarged one.
    pub scale_factor: u8,
    pub seed: u64,
    /// Relative standard deviation of the multiplicative readout noise.
    pub noise_std: f64,
}

impl Default for PufConfig {
    fn default() -> Self {
        PufConfig {
            grid_side: 5,
            image_side: 512,
            crop_side: 128,
            speckle_smoothing: 2.0,
            scale_factor: 1,
            seed: 0,
            noise_std: 0.0,
        }
    }
}

impl PufConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_side < 3 || self.grid_side.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "grid side must be odd and >= 3, got {}",
                self.grid_side
            )));
        }
        if self.image_side == 0 {
            return Err(Error::Config("image side must be positive".into()));
        }
        if self.crop_side == 0 || self.crop_side > self.image_side {
            return Err(Error::Config(format!(
                "crop side {} must be in 1..={}",
                self.crop_side, self.image_side
            )));
        }
        if !(self.speckle_smoothing >= 0.0) || !self.speckle_smoothing.is_finite() {
            return Err(Error::Config("speckle smoothing must be finite and >= 0".into()));
        }
        if !matches!(self.scale_factor, 1 | 2) {
            return Err(Error::Config(format!(
                "scale factor must be 1 or 2, got {}",
                self.scale_factor
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config("noise std must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Standard deviation of the Gaussian amplitude envelope in pixels.
    pub fn envelope_width(&self) -> f64 {
        let p = self.image_side as f64;
        if self.scale_factor == 2 {
            p / 3.0
        } else {
            p / 6.0
        }
    }
}

/// The persisted form of a PUF: patterns are always regenerated from the seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PufHeader {
    pub format: String,
    pub version: u32,
    pub config: PufConfig,
}

impl PufHeader {
    pub const FORMAT: &'static str = "puf-forge/puf";

    pub fn new(config: PufConfig) -> Self {
        PufHeader {
            format: Self::FORMAT.into(),
            version: 1,
            config,
        }
    }
}

/// The secret physics of one PUF instance. Immutable once built.
#[derive(Clone, Debug)]
pub struct TransmissionMatrix {
    config: PufConfig,
    patterns: Vec<Vec<Complex64>>,
}

/// Samples the per-block field patterns for `config`.
pub fn build_puf(config: &PufConfig) -> Result<TransmissionMatrix> {
    config.validate()?;
    let p = config.image_side;
    let envelope = gaussian_envelope(p, config.envelope_width());
    let smoothing = smoothing_taps(config.speckle_smoothing);
    let normal = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid normal");

    let patterns = (0..config.blocks())
        .map(|j| {
            let mut rng = rng::stream(config.seed, tag::PUF_PATTERN, j as u64);
            let mut re = vec![0.0; p * p];
            let mut im = vec![0.0; p * p];
            for (r, i) in re.iter_mut().zip(im.iter_mut()) {
                *r = normal.sample(&mut rng);
                *i = normal.sample(&mut rng);
            }
            if let Some(taps) = &smoothing {
                smooth_separable(&mut re, p, taps);
                smooth_separable(&mut im, p, taps);
            }
            re.iter()
                .zip(&im)
                .zip(&envelope)
                .map(|((r, i), e)| Complex64::new(r * e, i * e))
                .collect()
        })
        .collect();

    Ok(TransmissionMatrix {
        config: config.clone(),
        patterns,
    })
}

impl TransmissionMatrix {
    /// Builds a matrix directly from patterns. Used by tests and by the
    /// block-replication construction.
    pub fn from_patterns(config: PufConfig, patterns: Vec<Vec<Complex64>>) -> Result<Self> {
        config.validate()?;
        if patterns.len() != config.blocks() {
            return Err(Error::dim("pattern count", config.blocks(), patterns.len()));
        }
        let px = config.image_side * config.image_side;
        for pat in &patterns {
            if pat.len() != px {
                return Err(Error::dim("pattern pixel count", px, pat.len()));
            }
            if pat.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::NonFinite("transmission pattern"));
            }
        }
        Ok(TransmissionMatrix { config, patterns })
    }

    pub fn config(&self) -> &PufConfig {
        &self.config
    }

    pub fn blocks(&self) -> usize {
        self.patterns.len()
    }

    pub fn pattern(&self, block: usize) -> &[Complex64] {
        &self.patterns[block]
    }

    /// Full `p`×`p` noiseless response.
    pub fn respond(&self, challenge: &Challenge) -> Result<ResponseImage> {
        let p = self.config.image_side;
        self.respond_window(challenge, 0, 0, p, p)
    }

    /// Noiseless response restricted to the centered `side`×`side` window;
    /// equal to cropping the full response but cheaper.
    pub fn respond_cropped(&self, challenge: &Challenge, side: usize) -> Result<ResponseImage> {
        let p = self.config.image_side;
        if side == 0 || side > p {
            return Err(Error::Config(format!("crop side {side} exceeds image side {p}")));
        }
        let (r0, c0) = crop_offset(p, p, side);
        self.respond_window(challenge, r0, c0, side, side)
    }

    /// Response with multiplicative Gaussian readout noise of standard
    /// deviation `noise_std`. Pixels that the noise would push negative are
    /// clamped to zero.
    pub fn respond_noisy<R: Rng + ?Sized>(
        &self,
        challenge: &Challenge,
        rng: &mut R,
    ) -> Result<ResponseImage> {
        let clean = self.respond(challenge)?;
        self.add_noise(clean, rng)
    }

    pub fn add_noise<R: Rng + ?Sized>(&self, img: ResponseImage, rng: &mut R) -> Result<ResponseImage> {
        if self.config.noise_std == 0.0 {
            return Ok(img);
        }
        let normal = Normal::new(0.0, self.config.noise_std)
            .map_err(|e| Error::Config(format!("noise std: {e}")))?;
        let (h, w) = (img.height(), img.width());
        let data = img
            .into_pixels()
            .into_iter()
            .map(|v| v * (1.0 + normal.sample(rng)))
            .collect();
        ResponseImage::from_clamped(h, w, data)
    }

    fn respond_window(
        &self,
        challenge: &Challenge,
        r0: usize,
        c0: usize,
        height: usize,
        width: usize,
    ) -> Result<ResponseImage> {
        if challenge.len() != self.blocks() {
            return Err(Error::dim("challenge length", self.blocks(), challenge.len()));
        }
        let p = self.config.image_side;
        let mut re = vec![0.0; height * width];
        let mut im = vec![0.0; height * width];
        for (j, _) in challenge.bits().iter().enumerate().filter(|(_, b)| **b) {
            let pat = &self.patterns[j];
            for r in 0..height {
                let src = &pat[(r0 + r) * p + c0..(r0 + r) * p + c0 + width];
                let dr = &mut re[r * width..(r + 1) * width];
                let di = &mut im[r * width..(r + 1) * width];
                for ((z, a), b) in src.iter().zip(dr.iter_mut()).zip(di.iter_mut()) {
                    *a += z.re;
                    *b += z.im;
                }
            }
        }
        let data: Vec<f64> = re.iter().zip(&im).map(|(a, b)| a * a + b * b).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("respond"));
        }
        ResponseImage::new(height, width, data)
    }

    /// Equivalent PUF on the `factor`-times finer block grid: every sub-block
    /// of original block `j` carries `T_j / factor²`, so a block-split
    /// challenge produces the same field as the original one.
    pub fn replicate_blocks(&self, factor: usize) -> Result<TransmissionMatrix> {
        if factor == 0 {
            return Err(Error::Config("split factor must be >= 1".into()));
        }
        let l = self.config.grid_side;
        let fine = l * factor;
        let scale = 1.0 / (factor * factor) as f64;
        let mut patterns = Vec::with_capacity(fine * fine);
        for fr in 0..fine {
            for fc in 0..fine {
                let j = (fr / factor) * l + fc / factor;
                patterns.push(self.patterns[j].iter().map(|z| z * scale).collect());
            }
        }
        let config = PufConfig {
            grid_side: fine,
            ..self.config.clone()
        };
        // fine grids from even factors are not odd; skip the odd-side check
        Ok(TransmissionMatrix { config, patterns })
    }
}

fn gaussian_envelope(p: usize, width: f64) -> Vec<f64> {
    let center = (p as f64 - 1.0) / 2.0;
    let denom = 2.0 * width * width;
    let mut env = Vec::with_capacity(p * p);
    for r in 0..p {
        let dr = r as f64 - center;
        for c in 0..p {
            let dc = c as f64 - center;
            env.push((-(dr * dr + dc * dc) / denom).exp());
        }
    }
    env
}

/// 1D Gaussian taps normalized to unit energy, so smoothing white noise
/// preserves its variance.
fn smoothing_taps(sigma: f64) -> Option<Vec<f64>> {
    if sigma == 0.0 {
        return None;
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let energy = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|t| *t /= energy);
    Some(taps)
}

/// Zero-padded separable convolution of a `p`×`p` grid, in place.
fn smooth_separable(data: &mut [f64], p: usize, taps: &[f64]) {
    let radius = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; p * p];
    for r in 0..p {
        let row = &data[r * p..(r + 1) * p];
        let out = &mut tmp[r * p..(r + 1) * p];
        for (k, t) in taps.iter().enumerate() {
            let shift = k as isize - radius;
            for c in 0..p {
                let src = c as isize + shift;
                if src >= 0 && (src as usize) < p {
                    out[c] += t * row[src as usize];
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = 0.0);
    for (k, t) in taps.iter().enumerate() {
        let shift = k as isize - radius;
        for r in 0..p {
            let src = r as isize + shift;
            if src < 0 || src as usize >= p {
                continue;
            }
            let src_row = &tmp[src as usize * p..(src as usize + 1) * p];
            let out = &mut data[r * p..(r + 1) * p];
            for (o, s) in out.iter_mut().zip(src_row) {
                *o += t * s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::crop_center;

    fn small(l: usize, p: usize, sigma: f64, seed: u64) -> PufConfig {
        PufConfig {
            grid_side: l,
            image_side: p,
            crop_side: p / 2,
            speckle_smoothing: sigma,
            seed,
            ..PufConfig::default()
        }
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            small(4, 16, 0.0, 0),
            small(1, 16, 0.0, 0),
            PufConfig { crop_side: 32, ..small(3, 16, 0.0, 0) },
            PufConfig { image_side: 0, crop_side: 0, ..small(3, 16, 0.0, 0) },
            PufConfig { scale_factor: 3, ..small(3, 16, 0.0, 0) },
        ] {
            assert!(matches!(build_puf(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn same_seed_same_matrix() {
        let cfg = PufConfig { seed: 7, ..small(5, 64, 2.0, 7) };
        let a = build_puf(&cfg).unwrap();
        let b = build_puf(&cfg).unwrap();
        assert_eq!(a.patterns, b.patterns);
        let c = build_puf(&PufConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.patterns, c.patterns);
    }

    #[test]
    fn empty_challenge_is_dark() {
        let puf = build_puf(&small(5, 32, 2.0, 1)).unwrap();
        let img = puf.respond(&Challenge::zeros(5)).unwrap();
        assert!(img.pixels().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_block_is_pattern_modulus() {
        let puf = build_puf(&small(3, 16, 0.0, 3)).unwrap();
        let img = puf.respond(&Challenge::unit(3, 0).unwrap()).unwrap();
        for (v, z) in img.pixels().iter().zip(puf.pattern(0)) {
            assert_eq!(*v, z.norm_sqr());
        }
    }

    #[test]
    fn interference_breaks_superposition() {
        let puf = build_puf(&small(3, 16, 1.0, 11)).unwrap();
        let both = Challenge::new(3, vec![true, true, false, false, false, false, false, false, false]).unwrap();
        let i12 = puf.respond(&both).unwrap();
        let i1 = puf.respond(&Challenge::unit(3, 0).unwrap()).unwrap();
        let i2 = puf.respond(&Challenge::unit(3, 1).unwrap()).unwrap();
        let max_dev = i12
            .pixels()
            .iter()
            .zip(i1.pixels().iter().zip(i2.pixels()))
            .map(|(a, (b, c))| (a - b - c).abs())
            .fold(0.0, f64::max);
        assert!(max_dev > 1e-3, "max deviation {max_dev}");
    }

    #[test]
    fn respond_is_deterministic() {
        let puf = build_puf(&small(5, 32, 2.0, 4)).unwrap();
        let ch = Challenge::new(5, (0..25).map(|i| i % 3 == 0).collect()).unwrap();
        assert_eq!(puf.respond(&ch).unwrap(), puf.respond(&ch).unwrap());
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let puf = build_puf(&small(5, 16, 0.0, 4)).unwrap();
        assert!(matches!(puf.respond(&Challenge::zeros(3)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cropped_window_matches_crop_of_full() {
        let puf = build_puf(&small(3, 33, 1.5, 5)).unwrap();
        let ch = Challenge::new(3, vec![true, false, true, true, false, false, true, true, false]).unwrap();
        let full = puf.respond(&ch).unwrap();
        for side in [33, 16, 7] {
            assert_eq!(puf.respond_cropped(&ch, side).unwrap(), crop_center(&full, side).unwrap());
        }
    }

    #[test]
    fn smoothing_preserves_white_noise_variance() {
        let cfg = PufConfig {
            scale_factor: 2,
            ..small(3, 128, 2.0, 2)
        };
        let puf = build_puf(&cfg).unwrap();
        // central pixels: envelope close to 1, variance close to 1
        let p = 128;
        let mut acc = 0.0;
        let mut n = 0.0;
        for j in 0..puf.blocks() {
            for r in 56..72 {
                for c in 56..72 {
                    acc += puf.pattern(j)[r * p + c].norm_sqr();
                    n += 1.0;
                }
            }
        }
        let var = acc / n;
        assert!((0.7..1.3).contains(&var), "variance {var}");
    }

    #[test]
    fn noise_keeps_intensities_nonnegative() {
        let cfg = PufConfig { noise_std: 2.0, ..small(3, 16, 0.0, 9) };
        let puf = build_puf(&cfg).unwrap();
        let mut rng = rng::stream(1, tag::NOISE, 0);
        let ch = Challenge::new(3, vec![true; 9]).unwrap();
        let noisy = puf.respond_noisy(&ch, &mut rng).unwrap();
        assert!(noisy.pixels().iter().all(|v| *v >= 0.0));
        assert_ne!(noisy, puf.respond(&ch).unwrap());
    }
}
