//! Gabor filtering and zero-threshold binarization of speckle images.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ResponseImage;

/// The two fixed filters used throughout the evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KernelPreset {
    /// 35×35, near-isotropic medium scale.
    G1,
    /// 9×51, strongly anisotropic.
    G2,
}

impl KernelPreset {
    pub const ALL: [KernelPreset; 2] = [KernelPreset::G1, KernelPreset::G2];

    pub fn params(self) -> GaborParams {
        match self {
            KernelPreset::G1 => GaborParams {
                height: 35,
                width: 35,
                wavelength: 8.0,
                orientation: 0.0,
                phase: 0.0,
                sigma_x: 6.0,
                sigma_y: 6.0,
            },
            KernelPreset::G2 => GaborParams {
                height: 9,
                width: 51,
                wavelength: 12.0,
                orientation: PI / 2.0,
                phase: 0.0,
                sigma_x: 2.0,
                sigma_y: 12.0,
            },
        }
    }
}

impl fmt::Display for KernelPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelPreset::G1 => "G1",
            KernelPreset::G2 => "G2",
        })
    }
}

impl FromStr for KernelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "G1" => Ok(KernelPreset::G1),
            "G2" => Ok(KernelPreset::G2),
            other => Err(Error::Invalid(format!("unknown kernel preset '{other}'"))),
        }
    }
}

/// Real-part Daugman Gabor parameters. `sigma_x` runs along the carrier
/// direction (the axis rotated by `orientation` from the image x axis),
/// `sigma_y` across it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaborParams {
    pub height: usize,
    pub width: usize,
    /// Carrier wavelength in pixels; `f64::INFINITY` gives a pure Gaussian.
    pub wavelength: f64,
    pub orientation: f64,
    pub phase: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaborKernel {
    params: GaborParams,
    taps: Vec<f64>,
}

impl GaborKernel {
    pub fn preset(preset: KernelPreset) -> GaborKernel {
        GaborKernel::from_params(preset.params()).expect("presets are valid")
    }

    /// Samples `exp(-(x'²/2σx² + y'²/2σy²)) cos(2πx'/λ + ψ)` on the grid and
    /// removes its mean so constant regions filter to zero.
    pub fn from_params(params: GaborParams) -> Result<GaborKernel> {
        let GaborParams {
            height,
            width,
            wavelength,
            orientation,
            phase,
            sigma_x,
            sigma_y,
        } = params;
        if height == 0 || width == 0 || height % 2 == 0 || width % 2 == 0 {
            return Err(Error::Config(format!(
                "Gabor kernel dimensions must be odd, got {height}x{width}"
            )));
        }
        if !(wavelength > 0.0) || !(sigma_x > 0.0 && sigma_x.is_finite()) || !(sigma_y > 0.0 && sigma_y.is_finite())
        {
            return Err(Error::Config("Gabor wavelength and sigmas must be positive".into()));
        }
        let (s, c) = orientation.sin_cos();
        let cy = (height / 2) as f64;
        let cx = (width / 2) as f64;
        let mut taps = Vec::with_capacity(height * width);
        for i in 0..height {
            let y = i as f64 - cy;
            for j in 0..width {
                let x = j as f64 - cx;
                let xr = x * c + y * s;
                let yr = -x * s + y * c;
                let envelope = (-(xr * xr / (2.0 * sigma_x * sigma_x) + yr * yr / (2.0 * sigma_y * sigma_y))).exp();
                taps.push(envelope * (2.0 * PI * xr / wavelength + phase).cos());
            }
        }
        let mean = taps.iter().sum::<f64>() / taps.len() as f64;
        taps.iter_mut().for_each(|t| *t -= mean);
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("Gabor kernel"));
        }
        Ok(GaborKernel { params, taps })
    }

    pub fn params(&self) -> &GaborParams {
        &self.params
    }

    pub fn height(&self) -> usize {
        self.params.height
    }

    pub fn width(&self) -> usize {
        self.params.width
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn mean(&self) -> f64 {
        self.taps.iter().sum::<f64>() / self.taps.len() as f64
    }
}

/// Zero-padded, same-size 2D convolution of `img` with `kernel`.
///
/// Each product is formed against the difference to the output pixel's own
/// value, `Σ k_i (x_{p+i} - x_p)`, which equals the plain convolution for a
/// zero-mean kernel and makes constant regions filter to exactly zero.
pub fn gabor_filter(img: &ResponseImage, kernel: &GaborKernel) -> Result<Vec<f64>> {
    let (h, w) = (img.height(), img.width());
    let (kh, kw) = (kernel.height(), kernel.width());
    if kh > h || kw > w {
        return Err(Error::Config(format!(
            "kernel {kh}x{kw} is larger than image {h}x{w}"
        )));
    }
    let (cy, cx) = (kh / 2, kw / 2);
    let pw = w + kw - 1;
    let mut padded = vec![0.0; (h + kh - 1) * pw];
    for r in 0..h {
        padded[(r + cy) * pw + cx..(r + cy) * pw + cx + w].copy_from_slice(img.row(r));
    }
    let taps = kernel.taps();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let center = img.row(y);
        let acc = &mut out[y * w..(y + 1) * w];
        for u in 0..kh {
            let prow = &padded[(y + u) * pw..(y + u + 1) * pw];
            let krow = &taps[(kh - 1 - u) * kw..(kh - u) * kw];
            for v in 0..kw {
                let k = krow[kw - 1 - v];
                let src = &prow[v..v + w];
                for ((a, s), c) in acc.iter_mut().zip(src).zip(center) {
                    *a += k * (s - c);
                }
            }
        }
    }
    Ok(out)
}

/// Filters `img` and thresholds at zero: values `>= 0` become 1.
pub fn gabor_binarize(img: &ResponseImage, kernel: &GaborKernel) -> Result<BitResponse> {
    let filtered = gabor_filter(img, kernel)?;
    let bits: Vec<bool> = filtered.iter().map(|v| *v >= 0.0).collect();
    BitResponse::from_bits(img.height(), img.width(), &bits)
}

/// A binary response string, packed 64 bits per word, LSB first.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitResponse {
    height: usize,
    width: usize,
    words: Vec<u64>,
}

impl BitResponse {
    pub fn from_bits(height: usize, width: usize, bits: &[bool]) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dim("bit response length", height * width, bits.len()));
        }
        let mut words = vec![0u64; bits.len().div_ceil(64)];
        for (i, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
            words[i / 64] |= 1 << (i % 64);
        }
        Ok(BitResponse {
            height,
            width,
            words,
        })
    }

    /// Unpacks LSB-first bytes, as written by [`BitResponse::to_bytes`].
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let len = height * width;
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::dim("packed bit bytes", len.div_ceil(8), bytes.len()));
        }
        let bits: Vec<bool> = (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        BitResponse::from_bits(height, width, &bits)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len().div_ceil(8)];
        for i in (0..self.len()).filter(|&i| self.get(i)) {
            out[i / 8] |= 1 << (i % 8);
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn complement(&self) -> BitResponse {
        let bits: Vec<bool> = (0..self.len()).map(|i| !self.get(i)).collect();
        BitResponse::from_bits(self.height, self.width, &bits).expect("same shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn speckle(side: usize, seed: u64) -> ResponseImage {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ResponseImage::new(side, side, (0..side * side).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn presets_have_documented_shapes_and_zero_mean() {
        let g1 = GaborKernel::preset(KernelPreset::G1);
        assert_eq!((g1.height(), g1.width()), (35, 35));
        assert!(g1.mean().abs() < 1e-6);
        let g2 = GaborKernel::preset(KernelPreset::G2);
        assert_eq!((g2.height(), g2.width()), (9, 51));
        assert!(g2.mean().abs() < 1e-6);
    }

    #[test]
    fn even_dimensions_are_rejected() {
        let mut p = KernelPreset::G1.params();
        p.height = 34;
        assert!(matches!(GaborKernel::from_params(p), Err(Error::Config(_))));
    }

    #[test]
    fn infinite_wavelength_gives_centered_gaussian() {
        let sigma: f64 = 1.3;
        let k = GaborKernel::from_params(GaborParams {
            height: 3,
            width: 3,
            wavelength: f64::INFINITY,
            orientation: 0.4,
            phase: 0.0,
            sigma_x: sigma,
            sigma_y: sigma,
        })
        .unwrap();
        // isotropic Gaussian values at squared radius 0, 1, 2
        let g = |r2: f64| (-r2 / (2.0 * sigma * sigma)).exp();
        let raw = [g(2.), g(1.), g(2.), g(1.), g(0.), g(1.), g(2.), g(1.), g(2.)];
        let mean = raw.iter().sum::<f64>() / 9.0;
        for (t, r) in k.taps().iter().zip(raw) {
            assert!((t - (r - mean)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_filters_to_exact_zero_inside() {
        let img = ResponseImage::new(64, 64, vec![0.37; 64 * 64]).unwrap();
        for preset in KernelPreset::ALL {
            let k = GaborKernel::preset(preset);
            let f = gabor_filter(&img, &k).unwrap();
            let bits = gabor_binarize(&img, &k).unwrap();
            let (cy, cx) = (k.height() / 2, k.width() / 2);
            for y in cy..64 - cy {
                for x in cx..64 - cx {
                    assert_eq!(f[y * 64 + x], 0.0);
                    assert!(bits.get(y * 64 + x));
                }
            }
        }
    }

    #[test]
    fn matches_naive_convolution() {
        let img = speckle(40, 1);
        let k = GaborKernel::from_params(GaborParams {
            height: 5,
            width: 7,
            wavelength: 4.0,
            orientation: 0.7,
            phase: 0.3,
            sigma_x: 1.5,
            sigma_y: 2.5,
        })
        .unwrap();
        let fast = gabor_filter(&img, &k).unwrap();
        let (kh, kw) = (5isize, 7isize);
        for y in 0..40isize {
            for x in 0..40isize {
                let mut acc = 0.0;
                for u in 0..kh {
                    for v in 0..kw {
                        let (sy, sx) = (y + kh / 2 - u, x + kw / 2 - v);
                        if (0..40).contains(&sy) && (0..40).contains(&sx) {
                            acc += k.taps()[(u * kw + v) as usize] * img.get(sy as usize, sx as usize);
                        }
                    }
                }
                let got = fast[(y * 40 + x) as usize];
                // the fast form differs only by x_p * sum(k), which is ~1e-17
                assert!((got - acc).abs() < 1e-12, "{y},{x}: {got} vs {acc}");
            }
        }
    }

    #[test]
    fn binarization_is_scale_invariant_for_power_of_two_scales() {
        let img = speckle(64, 2);
        let k = GaborKernel::preset(KernelPreset::G2);
        let a = gabor_binarize(&img, &k).unwrap();
        assert_eq!(a, gabor_binarize(&img.scaled(2.0).unwrap(), &k).unwrap());
        assert_eq!(a, gabor_binarize(&img.scaled(0.125).unwrap(), &k).unwrap());
    }

    #[test]
    fn output_length_is_pixel_count() {
        let img = speckle(128, 3);
        let bits = gabor_binarize(&img, &GaborKernel::preset(KernelPreset::G1)).unwrap();
        assert_eq!(bits.len(), 16384);
    }

    #[test]
    fn kernel_larger_than_image_is_rejected() {
        let img = speckle(20, 4);
        assert!(gabor_binarize(&img, &GaborKernel::preset(KernelPreset::G1)).is_err());
        // 9x51 does not fit horizontally
        assert!(gabor_binarize(&speckle(40, 4), &GaborKernel::preset(KernelPreset::G2)).is_err());
    }

    #[test]
    fn packed_bytes_round_trip() {
        let bits: Vec<bool> = (0..77).map(|i| i % 3 == 0 || i % 7 == 1).collect();
        let b = BitResponse::from_bits(7, 11, &bits).unwrap();
        assert_eq!(BitResponse::from_bytes(7, 11, &b.to_bytes()).unwrap(), b);
        assert_eq!(b.to_bytes()[0], 0b0100_1011);
        assert_eq!(b.complement().count_ones(), 77 - b.count_ones());
    }
}
