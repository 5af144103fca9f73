//! CRP datasets: generation from a simulated PUF, on-disk persistence, and the
//! import/export path for externally recorded CRPs.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::challenge::{self, Challenge, SchemeType};
use crate::error::{Error, Result};
use crate::formats;
use crate::gabor::{gabor_binarize, BitResponse, GaborKernel, KernelPreset};
use crate::image::{crop_center, ResponseImage};
use crate::puf::{build_puf, PufConfig, TransmissionMatrix};
use crate::rng::{self, tag};

/// One challenge with its recorded response.
#[derive(Clone, Debug, PartialEq)]
pub struct Crp {
    pub challenge: Challenge,
    /// Uncropped response, when retained.
    pub full: Option<ResponseImage>,
    pub cropped: ResponseImage,
    pub bits: BTreeMap<KernelPreset, BitResponse>,
}

impl Crp {
    pub fn new(challenge: Challenge, cropped: ResponseImage) -> Self {
        Crp {
            challenge,
            full: None,
            cropped,
            bits: BTreeMap::new(),
        }
    }

    /// Keeps the full response and derives the centered crop from it.
    pub fn with_full(challenge: Challenge, full: ResponseImage, crop_side: usize) -> Result<Self> {
        let cropped = crop_center(&full, crop_side)?;
        Ok(Crp {
            challenge,
            full: Some(full),
            cropped,
            bits: BTreeMap::new(),
        })
    }

    /// Cached bit response for `preset`, or a fresh binarization of the crop.
    pub fn bits_for(&self, preset: KernelPreset, kernel: &GaborKernel) -> Result<Cow<'_, BitResponse>> {
        match self.bits.get(&preset) {
            Some(b) => Ok(Cow::Borrowed(b)),
            None => Ok(Cow::Owned(gabor_binarize(&self.cropped, kernel)?)),
        }
    }

    pub fn compute_bits(&mut self, presets: &[KernelPreset]) -> Result<()> {
        for &p in presets {
            if !self.bits.contains_key(&p) {
                let b = gabor_binarize(&self.cropped, &GaborKernel::preset(p))?;
                self.bits.insert(p, b);
            }
        }
        Ok(())
    }
}

/// Disjoint, exhaustive train/test assignment by CRP index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Draws `test_count` test indices from the seed; the rest train. Both
    /// lists are ascending.
    pub fn random(count: usize, test_count: usize, seed: u64) -> Result<Split> {
        if test_count >= count {
            return Err(Error::Config(format!(
                "test count {test_count} leaves no training CRPs out of {count}"
            )));
        }
        let mut test = index::sample(&mut rng::stream(seed, tag::SPLIT, 0), count, test_count).into_vec();
        test.sort_unstable();
        Split::from_test(count, test)
    }

    pub fn from_test(count: usize, mut test: Vec<usize>) -> Result<Split> {
        test.sort_unstable();
        if test.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid("duplicate test index".into()));
        }
        if let Some(i) = test.iter().find(|i| **i >= count) {
            return Err(Error::Invalid(format!("test index {i} out of range for {count} CRPs")));
        }
        let set: BTreeSet<usize> = test.iter().copied().collect();
        let train = (0..count).filter(|i| !set.contains(i)).collect();
        Ok(Split { train, test })
    }
}

/// Parameters for simulating a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub puf: PufConfig,
    pub scheme: SchemeType,
    pub count: usize,
    pub challenge_seed: u64,
    pub split_seed: u64,
    /// Defaults to a tenth of `count`.
    pub test_count: Option<usize>,
    pub kernels: Vec<KernelPreset>,
    /// Retain the uncropped responses (memory heavy).
    pub keep_full: bool,
}

impl DatasetSpec {
    pub fn new(puf: PufConfig, scheme: SchemeType, count: usize, seed: u64) -> Self {
        DatasetSpec {
            puf,
            scheme,
            count,
            challenge_seed: seed,
            split_seed: seed,
            test_count: None,
            kernels: KernelPreset::ALL.to_vec(),
            keep_full: false,
        }
    }

    pub fn test_count(&self) -> usize {
        self.test_count.unwrap_or(self.count / 10)
    }
}

/// Everything needed to reproduce or interpret a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    /// `simulated` or `imported`.
    pub source: String,
    pub puf: Option<PufConfig>,
    pub scheme: Option<SchemeType>,
    pub grid_side: usize,
    pub count: usize,
    pub challenge_seed: Option<u64>,
    pub split_seed: Option<u64>,
    pub image_side: usize,
    pub crop_side: usize,
    pub kernels: Vec<KernelPreset>,
    pub has_full: bool,
    /// Bit depth of imported grayscale images.
    pub bit_depth: Option<u32>,
    pub test_indices: Vec<usize>,
}

pub const DATASET_FORMAT: &str = "puf-forge/dataset";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub crps: Vec<Crp>,
    pub split: Split,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
        let puf = build_puf(&spec.puf)?;
        Dataset::generate_with(&puf, spec)
    }

    /// Simulates `spec.count` CRPs on an existing PUF instance.
    pub fn generate_with(puf: &TransmissionMatrix, spec: &DatasetSpec) -> Result<Dataset> {
        let cfg = puf.config();
        if cfg != &spec.puf {
            return Err(Error::Config("PUF instance does not match the dataset spec".into()));
        }
        let split = Split::random(spec.count, spec.test_count(), spec.split_seed)?;
        let challenges = challenge::generate(cfg.grid_side, spec.scheme, spec.count, spec.challenge_seed)?;
        let crps = challenges
            .into_par_iter()
            .enumerate()
            .map(|(i, ch)| {
                let mut noise = rng::stream(cfg.seed, tag::NOISE, i as u64);
                let mut crp = if spec.keep_full {
                    let full = puf.add_noise(puf.respond(&ch)?, &mut noise)?;
                    Crp::with_full(ch, full, cfg.crop_side)?
                } else {
                    let cropped = puf.add_noise(puf.respond_cropped(&ch, cfg.crop_side)?, &mut noise)?;
                    Crp::new(ch, cropped)
                };
                crp.compute_bits(&spec.kernels)?;
                Ok(crp)
            })
            .collect::<Result<Vec<Crp>>>()?;
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: 1,
            source: "simulated".into(),
            puf: Some(cfg.clone()),
            scheme: Some(spec.scheme),
            grid_side: cfg.grid_side,
            count: spec.count,
            challenge_seed: Some(spec.challenge_seed),
            split_seed: Some(spec.split_seed),
            image_side: cfg.image_side,
            crop_side: cfg.crop_side,
            kernels: spec.kernels.clone(),
            has_full: spec.keep_full,
            bit_depth: None,
            test_indices: split.test.clone(),
        };
        Ok(Dataset {
            manifest,
            crps,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.crps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crps.is_empty()
    }

    pub fn train(&self) -> Vec<&Crp> {
        self.split.train.iter().map(|&i| &self.crps[i]).collect()
    }

    pub fn test(&self) -> Vec<&Crp> {
        self.split.test.iter().map(|&i| &self.crps[i]).collect()
    }

    /// Cached or computed bit responses of every CRP for `preset`.
    pub fn bit_responses(&self, preset: KernelPreset) -> Result<Vec<BitResponse>> {
        let kernel = GaborKernel::preset(preset);
        self.crps
            .par_iter()
            .map(|c| c.bits_for(preset, &kernel).map(Cow::into_owned))
            .collect()
    }

    /// Replaces the split, e.g. with an externally prescribed one.
    pub fn with_split(mut self, split: Split) -> Result<Dataset> {
        if split.train.len() + split.test.len() != self.crps.len() {
            return Err(Error::Invalid("split does not cover the dataset".into()));
        }
        let check = Split::from_test(self.crps.len(), split.test.clone())?;
        if check != split {
            return Err(Error::Invalid("train and test indices must be disjoint and exhaustive".into()));
        }
        self.manifest.test_indices = split.test.clone();
        self.split = split;
        Ok(self)
    }

    /// Writes `manifest.json`, `challenges.bin`, `responses.f32`, optionally
    /// `full.f32`, and one `bits_<kernel>.bin` per recorded kernel.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        let challenges: Vec<Challenge> = self.crps.iter().map(|c| c.challenge.clone()).collect();
        formats::write_challenges(&dir.join("challenges.bin"), &challenges)?;
        let cropped: Vec<ResponseImage> = self.crps.iter().map(|c| c.cropped.clone()).collect();
        formats::write_images(&dir.join("responses.f32"), &cropped)?;
        if self.manifest.has_full {
            let full = self
                .crps
                .iter()
                .map(|c| c.full.clone().ok_or_else(|| Error::Invalid("missing full response".into())))
                .collect::<Result<Vec<_>>>()?;
            formats::write_images(&dir.join("full.f32"), &full)?;
        }
        for &k in &self.manifest.kernels {
            let bits = self.bit_responses(k)?;
            formats::write_bit_responses(&dir.join(format!("bits_{k}.bin")), &bits)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("manifest.json");
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&manifest_path)?).map_err(|e| {
            Error::Format {
                path: manifest_path.display().to_string(),
                reason: e.to_string(),
            }
        })?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::Format {
                path: manifest_path.display().to_string(),
                reason: format!("unexpected format '{}'", manifest.format),
            });
        }
        let n = manifest.count;
        let challenges = formats::read_challenges(&dir.join("challenges.bin"), manifest.grid_side, n)?;
        let cropped = formats::read_images(&dir.join("responses.f32"))?;
        if cropped.len() != n {
            return Err(Error::dim("stored responses", n, cropped.len()));
        }
        let mut full: Vec<Option<ResponseImage>> = vec![None; n];
        if manifest.has_full {
            let imgs = formats::read_images(&dir.join("full.f32"))?;
            if imgs.len() != n {
                return Err(Error::dim("stored full responses", n, imgs.len()));
            }
            full = imgs.into_iter().map(Some).collect();
        }
        let mut crps: Vec<Crp> = challenges
            .into_iter()
            .zip(cropped)
            .zip(full)
            .map(|((ch, c), f)| Crp {
                challenge: ch,
                full: f,
                cropped: c,
                bits: BTreeMap::new(),
            })
            .collect();
        let side = manifest.crop_side;
        for &k in &manifest.kernels {
            let path = dir.join(format!("bits_{k}.bin"));
            if path.exists() {
                for (crp, b) in crps.iter_mut().zip(formats::read_bit_responses(&path, side, side, n)?) {
                    crp.bits.insert(k, b);
                }
            }
        }
        let split = Split::from_test(n, manifest.test_indices.clone())?;
        Ok(Dataset {
            manifest,
            crps,
            split,
        })
    }
}

/// Options for [`import_external`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImportSpec {
    /// Center crop applied after normalization; defaults to the layout file
    /// or the full image.
    pub crop_side: Option<usize>,
    /// Explicit test indices; overrides the layout file.
    pub test_indices: Option<Vec<usize>>,
    /// Random test split size when no indices are given (default a tenth).
    pub test_count: Option<usize>,
    pub split_seed: u64,
    pub kernels: Vec<KernelPreset>,
}

/// Optional `layout.json` inside an external directory.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ExternalLayout {
    pub crop_side: Option<usize>,
    pub test_indices: Option<Vec<usize>>,
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "pgm", "tif", "tiff", "pnm"];

fn indexed_files(dir: &Path, exts: &[&str], problems: &mut Vec<String>) -> BTreeMap<usize, PathBuf> {
    let mut out = BTreeMap::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => {
            problems.push(format!("{}: {e}", dir.display()));
            return out;
        }
    };
    for entry in entries.flatten() {
        let path = entry.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| exts.contains(&e.as_str())) {
            continue;
        }
        match path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<usize>().ok()) {
            Some(i) => {
                if out.insert(i, path.clone()).is_some() {
                    problems.push(format!("index {i}: more than one file"));
                }
            }
            None => problems.push(format!("{}: file name is not a CRP index", path.display())),
        }
    }
    out
}

fn parse_challenge(text: &str) -> std::result::Result<Challenge, String> {
    let bits = text
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(format!("unexpected character '{other}'")),
        })
        .collect::<std::result::Result<Vec<bool>, String>>()?;
    Challenge::from_bits(bits).map_err(|e| e.to_string())
}

fn read_gray(path: &Path) -> std::result::Result<(ResponseImage, u32), String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let data = g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            Ok((ResponseImage::new(h, w, data).map_err(|e| e.to_string())?, 8))
        }
        image::DynamicImage::ImageLuma16(g) => {
            let data = g.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
            Ok((ResponseImage::new(h, w, data).map_err(|e| e.to_string())?, 16))
        }
        other => Err(format!("not a grayscale image ({:?})", other.color())),
    }
}

/// Reads `challenges/<i>.txt` (0/1 digits, whitespace ignored) and
/// `images/<i>.{png,pgm,tif}` (8- or 16-bit grayscale) for consecutive
/// indices `0..count`. Images are normalized to unit maximum and center
/// cropped. Every malformed or unmatched file is reported.
pub fn import_external(dir: &Path, spec: &ImportSpec) -> Result<Dataset> {
    let mut problems = Vec::new();
    let layout_path = dir.join("layout.json");
    let layout: ExternalLayout = if layout_path.exists() {
        serde_json::from_slice(&fs::read(&layout_path)?).map_err(|e| Error::Format {
            path: layout_path.display().to_string(),
            reason: e.to_string(),
        })?
    } else {
        ExternalLayout::default()
    };
    let challenge_files = indexed_files(&dir.join("challenges"), &["txt"], &mut problems);
    let image_files = indexed_files(&dir.join("images"), &IMAGE_EXTENSIONS, &mut problems);
    for i in challenge_files.keys().filter(|i| !image_files.contains_key(i)) {
        problems.push(format!("index {i}: challenge without image"));
    }
    for i in image_files.keys().filter(|i| !challenge_files.contains_key(i)) {
        problems.push(format!("index {i}: image without challenge"));
    }
    let count = challenge_files.len().max(image_files.len());
    for i in 0..count {
        if !challenge_files.contains_key(&i) && !image_files.contains_key(&i) {
            problems.push(format!("index {i}: missing (indices must be 0..{count})"));
        }
    }
    if count == 0 && problems.is_empty() {
        problems.push("no CRP files found".into());
    }
    if !problems.is_empty() {
        return Err(Error::Import(problems));
    }

    let loaded: Vec<std::result::Result<(Challenge, ResponseImage, u32), String>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let text = fs::read_to_string(&challenge_files[&i]).map_err(|e| format!("index {i}: {e}"))?;
            let ch = parse_challenge(&text).map_err(|e| format!("index {i}: challenge: {e}"))?;
            let (img, depth) = read_gray(&image_files[&i]).map_err(|e| format!("index {i}: image: {e}"))?;
            Ok((ch, img, depth))
        })
        .collect();
    let mut rows = Vec::with_capacity(count);
    for r in loaded {
        match r {
            Ok(v) => rows.push(v),
            Err(e) => problems.push(e),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Import(problems));
    }
    let (grid, h, w, depth) = {
        let (c, img, d) = &rows[0];
        (c.grid_side(), img.height(), img.width(), *d)
    };
    for (i, (c, img, d)) in rows.iter().enumerate() {
        if c.grid_side() != grid {
            problems.push(format!("index {i}: challenge has {} bits, expected {}", c.len(), grid * grid));
        }
        if (img.height(), img.width()) != (h, w) {
            problems.push(format!(
                "index {i}: image is {}x{}, expected {h}x{w}",
                img.height(),
                img.width()
            ));
        }
        if *d != depth {
            problems.push(format!("index {i}: {d}-bit image, expected {depth}-bit"));
        }
    }
    let crop_side = spec.crop_side.or(layout.crop_side).unwrap_or(h.min(w));
    if crop_side > h.min(w) || crop_side == 0 {
        problems.push(format!("crop side {crop_side} does not fit {h}x{w} images"));
    }
    if !problems.is_empty() {
        return Err(Error::Import(problems));
    }

    let kernels = if spec.kernels.is_empty() {
        KernelPreset::ALL.to_vec()
    } else {
        spec.kernels.clone()
    };
    let crps = rows
        .into_par_iter()
        .map(|(ch, img, _)| {
            let norm = img.to_unit_max();
            let mut crp = if (h, w) == (crop_side, crop_side) {
                Crp::new(ch, norm)
            } else {
                Crp {
                    cropped: crop_center(&norm, crop_side)?,
                    challenge: ch,
                    full: None,
                    bits: BTreeMap::new(),
                }
            };
            crp.compute_bits(&kernels)?;
            Ok(crp)
        })
        .collect::<Result<Vec<Crp>>>()?;

    let split = match spec.test_indices.clone().or(layout.test_indices) {
        Some(test) => Split::from_test(count, test)?,
        None => Split::random(count, spec.test_count.unwrap_or(count / 10), spec.split_seed)?,
    };
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: 1,
        source: "imported".into(),
        puf: None,
        scheme: None,
        grid_side: grid,
        count,
        challenge_seed: None,
        split_seed: Some(spec.split_seed),
        image_side: h.max(w),
        crop_side,
        kernels,
        has_full: false,
        bit_depth: Some(depth),
        test_indices: split.test.clone(),
    };
    Ok(Dataset {
        manifest,
        crps,
        split,
    })
}

/// Writes the cropped responses in the external layout as 16-bit PNGs scaled
/// to unit maximum, plus `layout.json` with the crop side and split.
pub fn export_external(dataset: &Dataset, dir: &Path) -> Result<()> {
    let cdir = dir.join("challenges");
    let idir = dir.join("images");
    fs::create_dir_all(&cdir)?;
    fs::create_dir_all(&idir)?;
    for (i, crp) in dataset.crps.iter().enumerate() {
        fs::write(cdir.join(format!("{i}.txt")), format!("{}", crp.challenge))?;
        let norm = crp.cropped.to_unit_max();
        let raw: Vec<u16> = norm.pixels().iter().map(|v| (v * 65535.0).round() as u16).collect();
        let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
            norm.width() as u32,
            norm.height() as u32,
            raw,
        )
        .expect("buffer size matches");
        buf.save(idir.join(format!("{i}.png"))).map_err(|e| Error::Format {
            path: idir.join(format!("{i}.png")).display().to_string(),
            reason: e.to_string(),
        })?;
    }
    let layout = ExternalLayout {
        crop_side: Some(dataset.manifest.crop_side),
        test_indices: Some(dataset.split.test.clone()),
    };
    fs::write(dir.join("layout.json"), serde_json::to_vec_pretty(&layout)?)?;
    Ok(())
}
