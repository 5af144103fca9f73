use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use puf_forge::dataset::{import_external, ImportSpec};
use puf_forge::experiment::{
    evaluate_dataset, run_attack, run_matrix, scale_experiment, threshold_samples, TrainedModel,
};
use puf_forge::metrics::{crossover_threshold, misclassified};
use puf_forge::puf::PufHeader;
use puf_forge::{
    AttackKind, AttackOptions, AttackReport, Dataset, DatasetSpec, KernelPreset, MatrixConfig, PufConfig,
    SchemeType,
};

/// Optical PUF simulator and modeling-attack workbench.
#[derive(Parser, Debug)]
#[command(name = "puf-forge", version, about)]
struct Cli {
    /// Worker threads (overrides PUF_FORGE_THREADS)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a PUF description (the patterns are regenerated from its seed)
    GenPuf {
        #[command(flatten)]
        puf: PufArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a CRP dataset
    GenDataset(GenDatasetArgs),
    /// Inter-response FHD and entropy of a dataset
    EvalDataset {
        #[arg(long)]
        dataset: PathBuf,
        /// Responses drawn for the pairwise FHD
        #[arg(long, default_value_t = 300)]
        sample: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one attack model and score it on the test split
    Attack(AttackArgs),
    /// Render an attack report as CSV, JSON and SVG boxplots
    Report {
        /// `attack_report.json` written by `attack`
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert an external CRP directory into a dataset
    Import {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        crop_side: Option<usize>,
        /// Comma-separated test indices
        #[arg(long, value_delimiter = ',')]
        test_indices: Option<Vec<usize>>,
        #[arg(long)]
        test_count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long, value_delimiter = ',', default_values_t = KernelPreset::ALL)]
        kernels: Vec<KernelPreset>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Like/unlike FHD cross-over threshold
    Threshold(ThresholdArgs),
    /// Run a size × scheme × model grid from a JSON config
    Matrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare attacks trained on a small and a large dataset of one PUF
    Scale {
        #[arg(long)]
        small: PathBuf,
        #[arg(long)]
        large: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "qlr")]
        models: Vec<AttackKind>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct PufArgs {
    /// Blocks per row of the challenge mask
    #[arg(long = "l", default_value_t = 5)]
    grid_side: usize,
    #[arg(long, default_value_t = 512)]
    image_side: usize,
    #[arg(long, default_value_t = 128)]
    crop_side: usize,
    /// Speckle grain (Gaussian sigma in pixels)
    #[arg(long, default_value_t = 2.0)]
    smoothing: f64,
    #[arg(long, default_value_t = 1)]
    scale_factor: u8,
    /// Relative multiplicative readout noise
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl PufArgs {
    fn config(&self) -> PufConfig {
        PufConfig {
            grid_side: self.grid_side,
            image_side: self.image_side,
            crop_side: self.crop_side,
            speckle_smoothing: self.smoothing,
            scale_factor: self.scale_factor,
            seed: self.seed,
            noise_std: self.noise,
        }
    }
}

#[derive(Args, Debug)]
struct GenDatasetArgs {
    /// PUF description from `gen-puf`; overrides the PUF flags
    #[arg(long)]
    puf: Option<PathBuf>,
    #[command(flatten)]
    puf_args: PufArgs,
    #[arg(long, default_value = "A")]
    scheme: SchemeType,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Challenge and split seed (defaults to the PUF seed)
    #[arg(long)]
    challenge_seed: Option<u64>,
    /// Defaults to a tenth of the count
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = KernelPreset::ALL)]
    kernels: Vec<KernelPreset>,
    /// Also store the uncropped responses
    #[arg(long)]
    keep_full: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    model: AttackKind,
    /// Fixed ridge penalty; selected on a validation split when absent
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// G1 FHD below which a prediction counts as accepted
    #[arg(long)]
    threshold: Option<f64>,
    /// Generator hidden widths
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Generator output side
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ThresholdArgs {
    /// Simulated dataset whose test CRPs are re-measured
    #[arg(long, conflicts_with_all = ["like", "unlike"])]
    dataset: Option<PathBuf>,
    /// File with one like-pair FHD per line
    #[arg(long, requires = "unlike")]
    like: Option<PathBuf>,
    /// File with one unlike-pair FHD per line
    #[arg(long, requires = "like")]
    unlike: Option<PathBuf>,
    #[arg(long, default_value = "G1")]
    kernel: KernelPreset,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .chain()
                .find_map(|c| c.downcast_ref::<puf_forge::Error>())
                .map_or_else(|| e.downcast_ref::<Usage>().is_some(), |p| p.is_validation());
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}

/// Bad flag combinations that clap cannot express.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn configure_threads(flag: Option<usize>) -> anyhow::Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("PUF_FORGE_THREADS") {
            Ok(v) => Some(v.parse().map_err(|_| Usage(format!("PUF_FORGE_THREADS must be a number, got '{v}'")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Usage("thread count must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenPuf { puf, out } => {
            let cfg = puf.config();
            cfg.validate()?;
            write_json(&out, &PufHeader::new(cfg))?;
        }
        Command::GenDataset(a) => {
            let puf = match &a.puf {
                Some(path) => {
                    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    let h: PufHeader = serde_json::from_str(&text).map_err(puf_forge::Error::from)?;
                    if h.format != PufHeader::FORMAT {
                        return Err(Usage(format!("{} is not a PUF description", path.display())).into());
                    }
                    h.config
                }
                None => a.puf_args.config(),
            };
            let seed = a.challenge_seed.unwrap_or(puf.seed);
            let mut spec = DatasetSpec::new(puf, a.scheme, a.count, seed);
            spec.test_count = a.test_count;
            spec.kernels = a.kernels;
            spec.keep_full = a.keep_full;
            let ds = Dataset::generate(&spec)?;
            ds.save(&a.out)?;
            println!("{} CRPs ({} train / {} test) in {}", ds.len(), ds.split.train.len(), ds.split.test.len(), a.out.display());
        }
        Command::EvalDataset { dataset, sample, seed, out } => {
            let ds = Dataset::load(&dataset)?;
            let ev = evaluate_dataset(&ds, sample, seed)?;
            ev.write_outputs(&out)?;
            for (k, r) in &ev.fhd {
                println!("FHD {k}: mean {:.4} over {} pairs", r.summary.mean, r.values.len());
            }
            println!("entropy: mean {:.4}", ev.entropy.summary.mean);
        }
        Command::Attack(a) => attack(a)?,
        Command::Report { input, out } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let report: AttackReport = serde_json::from_str(&text).map_err(puf_forge::Error::from)?;
            // summaries are always rebuilt from the rows
            let threshold = report.threshold.as_ref().map(|t| (t.threshold, t.kernel));
            let report = AttackReport::new(report.model, report.rows, threshold)?;
            report.write_outputs(&out)?;
        }
        Command::Import {
            dir,
            crop_side,
            test_indices,
            test_count,
            split_seed,
            kernels,
            out,
        } => {
            let spec = ImportSpec {
                crop_side,
                test_indices,
                test_count,
                split_seed,
                kernels,
            };
            let ds = import_external(&dir, &spec)?;
            ds.save(&out)?;
            println!("imported {} CRPs ({} train / {} test)", ds.len(), ds.split.train.len(), ds.split.test.len());
        }
        Command::Threshold(a) => threshold(a)?,
        Command::Matrix { config, out } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg: MatrixConfig = serde_json::from_str(&text).map_err(puf_forge::Error::from)?;
            let report = run_matrix(&cfg);
            fs::create_dir_all(&out)?;
            fs::write(out.join("table.csv"), report.table_csv())?;
            write_json(&out.join("cells.json"), &report)?;
            let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
            print!("{}", report.table_csv());
            if failed > 0 {
                bail!("{failed} of {} cells failed", report.cells.len());
            }
        }
        Command::Scale { small, large, models, seed, out } => {
            let (s, l) = (Dataset::load(&small)?, Dataset::load(&large)?);
            let opts = AttackOptions {
                seed,
                ..AttackOptions::default()
            };
            let report = scale_experiment(&s, &l, &models, &opts)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("scale.csv"), report.table_csv())?;
            write_json(&out.join("scale.json"), &report)?;
            print!("{}", report.table_csv());
        }
    }
    Ok(())
}

fn attack(a: AttackArgs) -> anyhow::Result<()> {
    let ds = Dataset::load(&a.dataset)?;
    let mut opts = AttackOptions::new(a.model);
    opts.lambda = a.lambda;
    opts.seed = a.seed;
    opts.threshold = a.threshold;
    opts.kernels = ds.manifest.kernels.clone();
    if let Some(h) = a.hidden {
        opts.generator.hidden = h;
    }
    if let Some(s) = a.side {
        opts.generator.side = s;
    }
    if let Some(e) = a.epochs {
        opts.generator.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        opts.generator.train.batch_size = b;
    }
    if a.lambda.is_some() && !a.model.is_ridge() {
        return Err(Usage(format!("--lambda applies to ridge models, not {}", a.model)).into());
    }
    let outcome = run_attack(&ds, &opts)?;
    fs::create_dir_all(&a.out)?;
    outcome.model.save(&a.out.join("model.bin"))?;
    if let TrainedModel::Generator(_, log) = &outcome.model {
        log.write_csv(fs::File::create(a.out.join("loss.csv"))?)?;
    }
    write_json(&a.out.join("attack_report.json"), &outcome.report)?;
    for k in outcome.report.kernels() {
        println!("{} {k}: mean test FHD {:.4}", a.model, outcome.report.mean_fhd(k).unwrap_or(f64::NAN));
    }
    Ok(())
}

fn read_values(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<f64>()
                .map_err(|_| Usage(format!("{}: line {}: not a number: '{l}'", path.display(), i + 1)).into())
        })
        .collect()
}

fn threshold(a: ThresholdArgs) -> anyhow::Result<()> {
    let (like, unlike) = match (&a.dataset, &a.like, &a.unlike) {
        (Some(dir), _, _) => threshold_samples(&Dataset::load(dir)?, a.kernel, a.count, a.seed)?,
        (None, Some(l), Some(u)) => (read_values(l)?, read_values(u)?),
        _ => return Err(Usage("give either --dataset or both --like and --unlike".into()).into()),
    };
    let t = crossover_threshold(&like, &unlike)?;
    let errors = misclassified(&like, &unlike, t);
    let result = serde_json::json!({
        "threshold": t,
        "kernel": a.kernel,
        "like_pairs": like.len(),
        "unlike_pairs": unlike.len(),
        "misclassified": errors,
        "error_rate": errors as f64 / (like.len() + unlike.len()) as f64,
    });
    match &a.out {
        Some(path) => write_json(path, &result)?,
        None => println!("{}", serde_json::to_string_pretty(&result)?),
    }
    Ok(())
}
