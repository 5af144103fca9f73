//! End-to-end pipelines: attacks on a dataset, dataset evaluation, the
//! size × scheme × model matrix, and the training-set scale comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::challenge::SchemeType;
use crate::dataset::{Crp, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::gabor::{gabor_binarize, GaborKernel, KernelPreset};
use crate::image::ResponseImage;
use crate::linear::{default_lambda_grid, fit_ols, fit_ridge, select_lambda, FeatureKind, RegressionModel};
use crate::metrics::{self, dataset_fhd, fhd, pearson, shannon_entropy, ssim, MetricsReport};
use crate::neural::{self, build_generator, GeneratorModel, TrainConfig, TrainReport};
use crate::puf::{build_puf, PufConfig};
use crate::report::{boxplot_svg, AttackReport, AttackRow, ModelMeta};
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Lr,
    Ridge,
    Qlr,
    Qrr,
    Generator,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [
        AttackKind::Lr,
        AttackKind::Ridge,
        AttackKind::Qlr,
        AttackKind::Qrr,
        AttackKind::Generator,
    ];

    pub fn features(self) -> Option<FeatureKind> {
        match self {
            AttackKind::Lr | AttackKind::Ridge => Some(FeatureKind::Raw),
            AttackKind::Qlr | AttackKind::Qrr => Some(FeatureKind::Quadratic),
            AttackKind::Generator => None,
        }
    }

    pub fn is_ridge(self) -> bool {
        matches!(self, AttackKind::Ridge | AttackKind::Qrr)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Lr => "lr",
            AttackKind::Ridge => "ridge",
            AttackKind::Qlr => "qlr",
            AttackKind::Qrr => "qrr",
            AttackKind::Generator => "generator",
        })
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Invalid(format!("unknown attack model '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorOptions {
    pub hidden: Vec<usize>,
    /// Output resolution; the crop side must be a multiple of it.
    pub side: usize,
    pub train: TrainConfig,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        GeneratorOptions {
            hidden: neural::DEFAULT_HIDDEN.to_vec(),
            side: neural::DEFAULT_SIDE,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackOptions {
    pub kind: AttackKind,
    /// Fixed ridge penalty; when absent it is selected on `lambda_grid`.
    pub lambda: Option<f64>,
    pub lambda_grid: Vec<f64>,
    pub seed: u64,
    pub kernels: Vec<KernelPreset>,
    /// FHD threshold (kernel G1) for the acceptance verdict.
    pub threshold: Option<f64>,
    pub generator: GeneratorOptions,
}

impl Default for AttackOptions {
    fn default() -> Self {
        AttackOptions {
            kind: AttackKind::Lr,
            lambda: None,
            lambda_grid: default_lambda_grid(),
            seed: 0,
            kernels: KernelPreset::ALL.to_vec(),
            threshold: None,
            generator: GeneratorOptions::default(),
        }
    }
}

impl AttackOptions {
    pub fn new(kind: AttackKind) -> Self {
        AttackOptions {
            kind,
            ..AttackOptions::default()
        }
    }
}

#[derive(Clone, Debug)]
pub enum TrainedModel {
    Regression(RegressionModel),
    Generator(GeneratorModel, TrainReport),
}

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            TrainedModel::Regression(m) => m.save(path),
            TrainedModel::Generator(g, _) => g.save(path),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub model: TrainedModel,
    /// Cropped-resolution predictions for the test CRPs, in split order.
    pub predictions: Vec<ResponseImage>,
    pub report: AttackReport,
}

/// Scores predictions of the test CRPs: FHD per kernel, Pearson correlation
/// of the intensities, and SSIM of the unit-max images.
pub fn evaluate_predictions(
    test: &[(usize, &Crp)],
    predictions: &[ResponseImage],
    kernels: &[KernelPreset],
) -> Result<Vec<AttackRow>> {
    if test.len() != predictions.len() {
        return Err(Error::dim("predictions", test.len(), predictions.len()));
    }
    let filters: Vec<(KernelPreset, GaborKernel)> = kernels.iter().map(|&k| (k, GaborKernel::preset(k))).collect();
    test.par_iter()
        .zip(predictions)
        .map(|(&(index, crp), pred)| {
            let mut dists = BTreeMap::new();
            for (k, kernel) in &filters {
                let truth = crp.bits_for(*k, kernel)?;
                dists.insert(*k, fhd(&gabor_binarize(pred, kernel)?, &truth)?);
            }
            Ok(AttackRow {
                index,
                fhd: dists,
                pearson: pearson(pred.pixels(), crp.cropped.pixels()).ok(),
                ssim: ssim(&pred.to_unit_max(), &crp.cropped.to_unit_max())?,
            })
        })
        .collect()
}

/// Trains the requested model on the training split and reports on the test split.
pub fn run_attack(dataset: &Dataset, opts: &AttackOptions) -> Result<AttackOutcome> {
    let train = dataset.train();
    let test_idx = &dataset.split.test;
    if train.is_empty() || test_idx.is_empty() {
        return Err(Error::Invalid("attack needs nonempty train and test splits".into()));
    }
    let test: Vec<(usize, &Crp)> = test_idx.iter().map(|&i| (i, &dataset.crps[i])).collect();
    let challenges: Vec<_> = test.iter().map(|(_, c)| c.challenge.clone()).collect();
    let mut details = BTreeMap::new();
    let (model, predictions, lambda, features) = match opts.kind.features() {
        Some(kind) => {
            let lambda = if opts.kind.is_ridge() {
                Some(match opts.lambda {
                    Some(l) => l,
                    None => {
                        let sel = select_lambda(&train, kind, &opts.lambda_grid, opts.seed)?;
                        details.insert("lambda_scores".into(), serde_json::to_value(&sel.scores)?);
                        sel.lambda
                    }
                })
            } else {
                None
            };
            let model = match lambda {
                Some(l) => fit_ridge(&train, kind, l)?,
                None => fit_ols(&train, kind)?,
            };
            if let Some(r) = model.residual() {
                details.insert("train_mse".into(), serde_json::json!(r.mse));
                details.insert("rank".into(), serde_json::json!(r.rank));
            }
            let preds = model.predict_batch(&challenges)?;
            let f = model.features();
            (TrainedModel::Regression(model), preds, lambda, f)
        }
        None => {
            let g = &opts.generator;
            let q = dataset.manifest.crop_side;
            if g.side == 0 || !q.is_multiple_of(g.side) {
                return Err(Error::Config(format!(
                    "generator side {} must divide the crop side {q}",
                    g.side
                )));
            }
            let n = train[0].challenge.len();
            let mut model = build_generator(n, &g.hidden, g.side, opts.seed)?;
            let targets = neural::prepare_targets(&train, g.side)?;
            let inputs: Vec<_> = train.iter().map(|c| c.challenge.clone()).collect();
            let cfg = TrainConfig {
                seed: opts.seed,
                ..g.train
            };
            let log = neural::train(&mut model, &inputs, &targets, &cfg)?;
            details.insert("hidden".into(), serde_json::json!(g.hidden));
            details.insert("side".into(), serde_json::json!(g.side));
            details.insert("initial_loss".into(), serde_json::json!(log.initial_loss));
            details.insert("final_loss".into(), serde_json::json!(log.final_loss()));
            let preds = model
                .predict_batch(&challenges)?
                .into_iter()
                .map(|p| p.upsample_nearest(q))
                .collect::<Result<Vec<_>>>()?;
            let count = model.parameter_count();
            (TrainedModel::Generator(model, log), preds, None, count)
        }
    };
    let rows = evaluate_predictions(&test, &predictions, &opts.kernels)?;
    let meta = ModelMeta {
        attack: opts.kind.to_string(),
        lambda,
        features,
        train_count: train.len(),
        test_count: test.len(),
        seed: opts.seed,
        details,
    };
    let threshold = opts.threshold.map(|t| (t, KernelPreset::G1));
    let report = AttackReport::new(meta, rows, threshold)?;
    Ok(AttackOutcome {
        model,
        predictions,
        report,
    })
}

/// Inter-response FHD per kernel and per-image entropy of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEvaluation {
    pub fhd: BTreeMap<KernelPreset, MetricsReport>,
    pub entropy: MetricsReport,
}

pub fn evaluate_dataset(dataset: &Dataset, sample_size: usize, seed: u64) -> Result<DatasetEvaluation> {
    let mut fhds = BTreeMap::new();
    for &k in &dataset.manifest.kernels {
        fhds.insert(k, dataset_fhd(&dataset.bit_responses(k)?, sample_size, seed)?);
    }
    let entropies = dataset
        .crps
        .par_iter()
        .map(|c| shannon_entropy(&c.cropped, 8))
        .collect::<Result<Vec<f64>>>()?;
    let labels = (0..entropies.len()).map(|i| i.to_string()).collect();
    Ok(DatasetEvaluation {
        fhd: fhds,
        entropy: MetricsReport::new(labels, entropies)?,
    })
}

impl DatasetEvaluation {
    /// `fhd_<kernel>.csv`, `entropy.csv`, `summary.json` and `fhd_boxplot.svg`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let write = |name: &str, r: &MetricsReport, col: &str| -> Result<()> {
            let mut s = format!("label,{col}\n");
            for (l, v) in r.labels.iter().zip(&r.values) {
                s.push_str(&format!("{l},{v}\n"));
            }
            fs::write(dir.join(name), s)?;
            Ok(())
        };
        for (k, r) in &self.fhd {
            write(&format!("fhd_{k}.csv"), r, "fhd")?;
        }
        write("entropy.csv", &self.entropy, "entropy")?;
        let summary = serde_json::json!({
            "fhd": self.fhd.iter().map(|(k, r)| (k.to_string(), &r.summary)).collect::<BTreeMap<_, _>>(),
            "entropy": self.entropy.summary,
        });
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        let series: Vec<(String, &metrics::BoxplotStats)> = self
            .fhd
            .iter()
            .map(|(k, r)| (format!("FHD {k}"), &r.summary.boxplot))
            .collect();
        fs::write(dir.join("fhd_boxplot.svg"), boxplot_svg("inter-response FHD", &series, (0.0, 1.0)))?;
        Ok(())
    }
}

/// Grid of dataset sizes, schemes and attack models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatrixConfig {
    pub sizes: Vec<usize>,
    pub schemes: Vec<SchemeType>,
    pub models: Vec<AttackKind>,
    pub count: usize,
    pub seed: u64,
    /// Template; `grid_side` is replaced per cell.
    pub puf: PufConfig,
    /// Template; `kind` is replaced per model.
    pub attack: AttackOptions,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig {
            sizes: vec![5, 7, 9, 11, 13, 15],
            schemes: SchemeType::ALL.to_vec(),
            models: vec![AttackKind::Lr],
            count: 1000,
            seed: 0,
            puf: PufConfig::default(),
            attack: AttackOptions::default(),
        }
    }
}

impl MatrixConfig {
    pub fn dataset_spec(&self, size: usize, scheme: SchemeType) -> DatasetSpec {
        let puf = PufConfig {
            grid_side: size,
            seed: self.seed,
            ..self.puf.clone()
        };
        let mut spec = DatasetSpec::new(puf, scheme, self.count, self.seed);
        spec.kernels = self.attack.kernels.clone();
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub size: usize,
    pub scheme: SchemeType,
    pub model: AttackKind,
    pub mean_fhd: BTreeMap<KernelPreset, f64>,
    pub error: Option<String>,
    pub report: Option<AttackReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub cells: Vec<MatrixCell>,
}

impl MatrixReport {
    /// `size,scheme,model,mean_fhd_G1,mean_fhd_G2,error`
    pub fn table_csv(&self) -> String {
        let mut s = String::from("size,scheme,model,mean_fhd_G1,mean_fhd_G2,error\n");
        for c in &self.cells {
            let m = |k| c.mean_fhd.get(&k).map_or(String::new(), |v: &f64| v.to_string());
            let err = c.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            s.push_str(&format!(
                "{},{},{},{},{},{err}\n",
                c.size,
                c.scheme,
                c.model,
                m(KernelPreset::G1),
                m(KernelPreset::G2)
            ));
        }
        s
    }
}

/// Runs every cell of the grid. Dataset groups run in parallel; a failing
/// cell records its error and the rest continue.
pub fn run_matrix(cfg: &MatrixConfig) -> MatrixReport {
    let groups: Vec<(usize, SchemeType)> = cfg
        .sizes
        .iter()
        .flat_map(|&l| cfg.schemes.iter().map(move |&s| (l, s)))
        .collect();
    let cells = groups
        .par_iter()
        .flat_map_iter(|&(size, scheme)| {
            let dataset = Dataset::generate(&cfg.dataset_spec(size, scheme));
            cfg.models
                .iter()
                .map(|&model| {
                    let outcome = dataset.as_ref().map_err(|e| e.to_string()).and_then(|ds| {
                        let opts = AttackOptions {
                            kind: model,
                            ..cfg.attack.clone()
                        };
                        run_attack(ds, &opts).map_err(|e| e.to_string())
                    });
                    match outcome {
                        Ok(o) => MatrixCell {
                            size,
                            scheme,
                            model,
                            mean_fhd: o
                                .report
                                .kernels()
                                .into_iter()
                                .filter_map(|k| o.report.mean_fhd(k).map(|m| (k, m)))
                                .collect(),
                            error: None,
                            report: Some(o.report),
                        },
                        Err(e) => MatrixCell {
                            size,
                            scheme,
                            model,
                            mean_fhd: BTreeMap::new(),
                            error: Some(e),
                            report: None,
                        },
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    MatrixReport { cells }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub model: AttackKind,
    pub kernel: KernelPreset,
    pub small_train: usize,
    pub large_train: usize,
    pub small_fhd: f64,
    pub large_fhd: f64,
    /// `100 · (small - large) / small`; 100 % means the FHD dropped to zero.
    pub improvement_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    pub rows: Vec<ScaleRow>,
}

impl ScaleReport {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("model,kernel,small_train,large_train,small_fhd,large_fhd,improvement_pct\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.model, r.kernel, r.small_train, r.large_train, r.small_fhd, r.large_fhd, r.improvement_pct
            ));
        }
        s
    }
}

/// Relative FHD improvement in percent; zero when both are zero.
pub fn improvement_pct(small: f64, large: f64) -> f64 {
    if small == 0.0 {
        if large == 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        100.0 * (small - large) / small
    }
}

/// Trains each model on both datasets and compares their test FHDs.
pub fn scale_experiment(
    small: &Dataset,
    large: &Dataset,
    models: &[AttackKind],
    opts: &AttackOptions,
) -> Result<ScaleReport> {
    let (a, b) = (&small.manifest, &large.manifest);
    match (&a.puf, &b.puf) {
        (Some(pa), Some(pb)) if pa.seed != pb.seed => {
            return Err(Error::Invalid(format!(
                "datasets come from different PUF seeds ({} vs {})",
                pa.seed, pb.seed
            )))
        }
        (Some(_), None) | (None, Some(_)) => {
            return Err(Error::Invalid("cannot compare a simulated with an imported dataset".into()))
        }
        _ => {}
    }
    if a.scheme != b.scheme || a.grid_side != b.grid_side {
        return Err(Error::Invalid("datasets differ in scheme or grid size".into()));
    }
    let mut rows = Vec::new();
    for &model in models {
        let o = AttackOptions {
            kind: model,
            ..opts.clone()
        };
        let rs = run_attack(small, &o)?.report;
        let rl = run_attack(large, &o)?.report;
        for k in rs.kernels() {
            let (fs, fl) = (rs.mean_fhd(k).expect("kernel"), rl.mean_fhd(k).expect("kernel"));
            rows.push(ScaleRow {
                model,
                kernel: k,
                small_train: rs.model.train_count,
                large_train: rl.model.train_count,
                small_fhd: fs,
                large_fhd: fl,
                improvement_pct: improvement_pct(fs, fl),
            });
        }
    }
    Ok(ScaleReport { rows })
}

/// Like and unlike FHD samples for threshold calibration. Each of the first
/// `count` test CRPs is measured again with fresh readout noise (like pairs);
/// unlike pairs are all pairs of those recorded responses.
pub fn threshold_samples(
    dataset: &Dataset,
    kernel: KernelPreset,
    count: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cfg = dataset
        .manifest
        .puf
        .as_ref()
        .ok_or_else(|| Error::Invalid("re-measurement needs a simulated dataset".into()))?;
    let puf = build_puf(cfg)?;
    let filter = GaborKernel::preset(kernel);
    let chosen: Vec<usize> = dataset.split.test.iter().copied().take(count.max(2)).collect();
    if chosen.len() < 2 {
        return Err(Error::Invalid("need at least two test CRPs".into()));
    }
    let pairs = chosen
        .par_iter()
        .map(|&i| {
            let crp = &dataset.crps[i];
            let mut noise = rng::stream(seed, tag::NOISE, i as u64 + (1 << 32));
            let again = puf.add_noise(puf.respond_cropped(&crp.challenge, cfg.crop_side)?, &mut noise)?;
            let recorded = crp.bits_for(kernel, &filter)?.into_owned();
            let like = fhd(&gabor_binarize(&again, &filter)?, &recorded)?;
            Ok((like, recorded))
        })
        .collect::<Result<Vec<_>>>()?;
    let like = pairs.iter().map(|p| p.0).collect();
    let bits: Vec<_> = pairs.into_iter().map(|p| p.1).collect();
    let unlike = dataset_fhd(&bits, bits.len(), seed)?.values;
    Ok((like, unlike))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attack_kind_round_trips() {
        for k in AttackKind::ALL {
            assert_eq!(k.to_string().parse::<AttackKind>().unwrap(), k);
        }
        assert!("svm".parse::<AttackKind>().is_err());
    }

    #[test]
    fn improvement_definition() {
        assert_eq!(improvement_pct(0.2, 0.0), 100.0);
        assert_eq!(improvement_pct(0.2, 0.2), 0.0);
        assert_eq!(improvement_pct(0.0, 0.0), 0.0);
        assert!((improvement_pct(0.181, 0.075) - 58.563).abs() < 1e-3);
    }

    #[test]
    fn default_matrix_has_24_cells() {
        let cfg = MatrixConfig::default();
        assert_eq!(cfg.sizes.len() * cfg.schemes.len(), 24);
    }
}
