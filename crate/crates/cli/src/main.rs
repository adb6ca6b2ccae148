use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use unissr::ablation::{comparison_table, run_ablation};
use unissr::checkpoint::Checkpoint;
use unissr::config::{Precision, RunConfig, Variant};
use unissr::data::{
    generate_synthetic, ingest_reviews, preprocess, read_jsonl, read_records, write_json, write_jsonl, Dataset,
    PreprocessConfig, ReviewInteraction, Scenario, Split, SyntheticConfig,
};
use unissr::diagnostics::{toy_config, toy_gradcheck};
use unissr::metrics::MetricsReport;
use unissr::model::UnifiedSsr;
use unissr::numeric::{AdamState, Real};
use unissr::train::{evaluate, finetune, pretrain, vocab_of, LogEntry, Observer, Stage};
use unissr::Error;

const RESOLVED_CONFIG: &str = "config.resolved.json";

#[derive(Parser)]
#[command(name = "unissr", version, about = "Unified sequential search and recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted intents.
    GenData {
        #[command(flatten)]
        io: ConfigOut,
    },
    /// Filter, remap and split raw records.
    Preprocess {
        /// JSONL user records.
        #[arg(long, conflicts_with = "raw_reviews", required_unless_present = "raw_reviews")]
        records: Option<PathBuf>,
        /// JSONL review interactions; queries are built from attributes and review keywords.
        #[arg(long)]
        raw_reviews: Option<PathBuf>,
        /// Review keywords per query.
        #[arg(long, default_value_t = 3)]
        keywords: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint pretraining on both scenarios.
    Pretrain {
        #[command(flatten)]
        io: ConfigOut,
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune a checkpoint on one scenario.
    Finetune {
        #[command(flatten)]
        io: ConfigOut,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenario: Scenario,
    },
    /// Score the test (or validation) split of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Omit to evaluate every scenario present in the data.
        #[arg(long)]
        scenario: Option<Scenario>,
        #[arg(long)]
        valid: bool,
        /// Evaluation settings (tie-break, negatives); must keep the checkpoint's architecture.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate several variants over several seeds.
    Ablate {
        #[command(flatten)]
        io: ConfigOut,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of the joint loss gradient on a toy batch.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct ConfigOut {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Replaces the seed given in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AblationConfig {
    #[serde(default)]
    base: RunConfig,
    #[serde(default = "all_variants")]
    variants: Vec<Variant>,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            base: RunConfig::default(),
            variants: all_variants(),
            seeds: default_seeds(),
        }
    }
}

fn all_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

type Result<T> = std::result::Result<T, Error>;

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn prepare_out(out: &Path, resolved: &impl Serialize) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write_json(&out.join(RESOLVED_CONFIG), resolved)
}

fn run_config(io: &ConfigOut) -> Result<RunConfig> {
    let mut cfg: RunConfig = read_config(io.config.as_deref())?;
    if let Some(seed) = io.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the JSONL training log and a checkpoint after every epoch.
struct Artifacts {
    dir: PathBuf,
    log: Vec<LogEntry>,
}

impl Artifacts {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            log: Vec::new(),
        }
    }

    fn flush(&self, name: &str) -> Result<()> {
        write_jsonl(&self.dir.join(name), &self.log)
    }
}

impl<F: Real> Observer<F> for Artifacts {
    fn log(&mut self, entry: &LogEntry) -> Result<()> {
        self.log.push(entry.clone());
        Ok(())
    }

    fn epoch_end(&mut self, stage: Stage, epoch: usize, model: &UnifiedSsr<F>, optimizer: &AdamState<F>) -> Result<()> {
        log::info!("{stage} epoch {} done", epoch + 1);
        let dir = self.dir.join("checkpoints");
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        Checkpoint::capture(model, stage, epoch + 1, Some(optimizer)).save(&dir.join(format!("{stage}-epoch{:03}.json", epoch + 1)))
    }
}

fn print_reports(reports: &[MetricsReport], out: &Path) -> Result<()> {
    for r in reports {
        write_json(&out.join(format!("metrics-{}.json", r.scenario)), r)?;
    }
    let table = MetricsReport::table(reports);
    std::fs::write(out.join("metrics.txt"), format!("{table}\n")).map_err(|e| Error::Io {
        path: out.join("metrics.txt"),
        source: e,
    })?;
    println!("{table}");
    Ok(())
}

fn do_pretrain<F: Real>(cfg: RunConfig, ds: &Dataset, out: &Path) -> Result<()> {
    let mut model = UnifiedSsr::<F>::new(cfg, vocab_of(ds))?;
    let mut art = Artifacts::new(out);
    let result = pretrain(&mut model, ds, &mut art);
    art.flush("pretrain.log.jsonl")?;
    let optimizer = result?;
    let epochs = model.config.epochs;
    Checkpoint::capture(&model, Stage::Pretrain, epochs, Some(&optimizer)).save(&out.join("pretrain.json"))
}

fn do_finetune<F: Real>(cfg: RunConfig, ds: &Dataset, checkpoint: &Path, scenario: Scenario, out: &Path) -> Result<()> {
    let ck = Checkpoint::<F>::load(checkpoint)?;
    if ck.vocab != vocab_of(ds) {
        return Err(Error::Data("checkpoint vocabulary does not match the dataset".into()));
    }
    let mut model = ck.restore_with(cfg)?;
    let mut art = Artifacts::new(out);
    let stage = Stage::finetune(scenario);
    let result = finetune(&mut model, ds, scenario, &mut art);
    art.flush(&format!("{stage}.log.jsonl"))?;
    let summary = result?;
    Checkpoint::capture(&model, stage, summary.epochs_run, Some(&summary.optimizer)).save(&out.join(format!("{stage}.json")))?;
    let report = evaluate(&model, ds, scenario, Split::Test)?;
    print_reports(&[report], out)
}

fn do_evaluate<F: Real>(checkpoint: &Path, config: Option<&Path>, ds: &Dataset, scenarios: &[Scenario], split: Split, out: &Path) -> Result<()> {
    let ck = Checkpoint::<F>::load(checkpoint)?;
    let cfg = match config {
        Some(p) => read_config(Some(p))?,
        None => ck.config.clone(),
    };
    prepare_out(out, &cfg)?;
    let model = ck.restore_with(cfg)?;
    let reports = scenarios
        .iter()
        .map(|&s| evaluate(&model, ds, s, split))
        .collect::<Result<Vec<_>>>()?;
    print_reports(&reports, out)
}

fn checkpoint_precision(path: &Path) -> Result<Precision> {
    #[derive(Deserialize)]
    struct Head {
        config: RunConfig,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let head: Head = serde_json::from_str::<serde_json::Value>(&text)
        .and_then(serde_json::from_value)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(head.config.precision)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { io } => {
            let mut cfg: SyntheticConfig = read_config(io.config.as_deref())?;
            if let Some(seed) = io.seed {
                cfg.seed = seed;
            }
            prepare_out(&io.out, &cfg)?;
            let data = generate_synthetic(&cfg)?;
            write_jsonl(&io.out.join("records.jsonl"), &data.records)?;
            write_jsonl(&io.out.join("boundaries.jsonl"), &data.boundaries)?;
            log::info!("wrote {} users", data.records.len());
        }
        Command::Preprocess {
            records,
            raw_reviews,
            keywords,
            config,
            out,
        } => {
            let cfg: PreprocessConfig = read_config(config.as_deref())?;
            prepare_out(&out, &cfg)?;
            let records = match (records, raw_reviews) {
                (Some(path), _) => read_records(&path)?,
                (None, Some(path)) => {
                    let raw: Vec<ReviewInteraction> = read_jsonl(&path)?;
                    let (records, words) = ingest_reviews(&raw, keywords)?;
                    write_json(&out.join("words.json"), &words)?;
                    records
                }
                (None, None) => unreachable!("clap requires one input"),
            };
            let ds = preprocess(records, &cfg)?;
            ds.save(&out)?;
            println!("{}", serde_json::to_string(&ds.manifest.vocab)?);
        }
        Command::Pretrain { io, data } => {
            let cfg = run_config(&io)?;
            prepare_out(&io.out, &cfg)?;
            let ds = Dataset::load(&data)?;
            match cfg.precision {
                Precision::F32 => do_pretrain::<f32>(cfg, &ds, &io.out)?,
                Precision::F64 => do_pretrain::<f64>(cfg, &ds, &io.out)?,
            }
        }
        Command::Finetune {
            io,
            data,
            checkpoint,
            scenario,
        } => {
            let cfg = run_config(&io)?;
            prepare_out(&io.out, &cfg)?;
            let ds = Dataset::load(&data)?;
            match cfg.precision {
                Precision::F32 => do_finetune::<f32>(cfg, &ds, &checkpoint, scenario, &io.out)?,
                Precision::F64 => do_finetune::<f64>(cfg, &ds, &checkpoint, scenario, &io.out)?,
            }
        }
        Command::Evaluate {
            checkpoint,
            data,
            scenario,
            valid,
            config,
            out,
        } => {
            let ds = Dataset::load(&data)?;
            let scenarios: Vec<Scenario> = match scenario {
                Some(s) => vec![s],
                None => Scenario::BOTH
                    .into_iter()
                    .filter(|&s| ds.sequences_of(s).next().is_some())
                    .collect(),
            };
            let split = if valid { Split::Valid } else { Split::Test };
            match checkpoint_precision(&checkpoint)? {
                Precision::F32 => do_evaluate::<f32>(&checkpoint, config.as_deref(), &ds, &scenarios, split, &out)?,
                Precision::F64 => do_evaluate::<f64>(&checkpoint, config.as_deref(), &ds, &scenarios, split, &out)?,
            }
        }
        Command::Ablate { io, data } => {
            let mut cfg: AblationConfig = read_config(io.config.as_deref())?;
            if let Some(seed) = io.seed {
                cfg.seeds = vec![seed];
            }
            cfg.base.validate()?;
            prepare_out(&io.out, &cfg)?;
            let ds = Dataset::load(&data)?;
            let reports = run_ablation(&cfg.base, &cfg.variants, &cfg.seeds, &ds)?;
            write_jsonl(&io.out.join("reports.jsonl"), &reports)?;
            let tables: Vec<String> = Scenario::BOTH.iter().map(|&s| comparison_table(&reports, s)).collect();
            let text = tables.join("\n\n");
            std::fs::write(io.out.join("comparison.txt"), format!("{text}\n")).map_err(|e| Error::Io {
                path: io.out.join("comparison.txt"),
                source: e,
            })?;
            println!("{text}");
        }
        Command::Gradcheck { config, out, seed } => {
            let mut cfg: RunConfig = match config {
                Some(p) => read_config(Some(&p))?,
                None => toy_config(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            let report = toy_gradcheck(&cfg, 1e-5, 1e-4)?;
            if let Some(out) = out {
                prepare_out(&out, &cfg)?;
                write_json(&out.join("gradcheck.json"), &report)?;
            }
            println!(
                "gradcheck {} max_rel_error={:.3e} tolerance={:.0e}",
                if report.passed { "PASS" } else { "FAIL" },
                report.max_rel_error,
                report.tolerance
            );
            if !report.passed {
                return Err(Error::Data(format!(
                    "gradient check failed: max relative error {:.3e}",
                    report.max_rel_error
                )));
            }
        }
    }
    Ok(())
}

fn kind(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) => ("config", 2),
        Error::ShapeMismatch { .. } => ("shape", 1),
        Error::Data(_) => ("data", 1),
        Error::Diverged { .. } => ("diverged", 1),
        Error::Io { .. } => ("io", 1),
        Error::Json(_) => ("json", 1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (tag, code) = kind(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("unissr: error[{tag}]: {msg}");
            ExitCode::from(code)
        }
    }
}
