//! Subcommand implementations behind the `ppea` binary.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ppea::autodiff::Fault;
use ppea::data::{generate_dataset, Dataset, SynthConfig, Variant};
use ppea::eval::{evaluate_dataset, EvalOutput};
use ppea::gradcheck::{full_suite, CheckResult};
use ppea::losses::LossWeights;
use ppea::metrics::{format_table, Aggregation, MetricsReport};
use ppea::networks::params::name_hash;
use ppea::networks::{ModelConfig, Network};
use ppea::training::{run_stage_from_config, Checkpoint, EpochRecord, StageConfig};
use ppea::{DType, Error, Scalar};

/// Process exit status with a message for stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn verify(message: impl Into<String>) -> Self {
        Self { code: EXIT_VERIFY, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::FrozenModified(_) | Error::NonFiniteLoss { .. } => Self::verify(e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::usage(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

/// A whole two-stage experiment. Stage seeds are derived from `seed`
/// (mixed with each stage's own `seed` field), so one number fixes a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dtype: DType,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossWeights,
    pub stage1: Option<StageConfig>,
    pub stage2: Option<StageConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult {
        self.model.validate()?;
        self.loss.validate()?;
        for (n, s) in [(1, &self.stage1), (2, &self.stage2)] {
            if let Some(s) = s {
                if s.stage != n {
                    return Err(Failure::usage(format!("section stage{n} declares stage {}", s.stage)));
                }
                if s.stage == 1 {
                    s.validate()?;
                }
            }
        }
        Ok(())
    }

    /// The resolved configuration of stage `n`; paths are taken relative to
    /// the config file's directory.
    pub fn stage(&self, n: u8, base: &Path, init_from: Option<PathBuf>) -> CliResult<StageConfig> {
        let section = match n {
            1 => &self.stage1,
            2 => &self.stage2,
            _ => return Err(Failure::usage(format!("unknown stage {n}"))),
        };
        let mut s = section.clone().ok_or_else(|| Failure::usage(format!("config has no stage{n} section")))?;
        s.seed ^= self.seed ^ name_hash(&format!("stage{n}"));
        s.dataset_path = base.join(&s.dataset_path);
        s.eval_path = s.eval_path.map(|p| base.join(p));
        s.init_from = init_from.or(s.init_from.map(|p| base.join(p)));
        s.validate()?;
        Ok(s)
    }
}

pub fn cmd_synth(variant: Variant, count: usize, seed: u64, out: &Path, config: Option<&Path>) -> CliResult<PathBuf> {
    let cfg = match config {
        Some(p) => serde_json::from_str::<SynthConfig>(&fs::read_to_string(p)?)?,
        None => SynthConfig::default(),
    };
    if count == 0 {
        return Err(Failure::usage("--count must be positive"));
    }
    Ok(generate_dataset(out, &cfg, variant, count, seed)?)
}

/// Files written by a training run.
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub eval: PathBuf,
    pub history: Vec<EpochRecord>,
}

fn train_typed<F: Scalar>(run: &RunConfig, stage: &StageConfig, out_dir: &Path) -> CliResult<TrainArtifacts> {
    fs::create_dir_all(out_dir)?;
    let n = stage.stage;
    let log_path = out_dir.join(format!("stage{n}.log.jsonl"));
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let outcome = run_stage_from_config::<F>(stage, &run.model, &run.loss, &mut log)?;
    log.flush()?;
    let checkpoint = out_dir.join(format!("stage{n}.ckpt"));
    outcome.checkpoint(n)?.save(&checkpoint)?;
    let eval = out_dir.join(format!("stage{n}.eval.json"));
    fs::write(&eval, serde_json::to_string_pretty(&outcome.history)?)?;
    Ok(TrainArtifacts { checkpoint, log: log_path, eval, history: outcome.history })
}

pub fn cmd_train(config: &Path, stage: u8, init_from: Option<PathBuf>) -> CliResult<TrainArtifacts> {
    let run = RunConfig::load(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let s = run.stage(stage, base, init_from)?;
    let out_dir = base.join(&run.output_dir);
    match run.dtype {
        DType::F32 => train_typed::<f32>(&run, &s, &out_dir),
        DType::F64 => train_typed::<f64>(&run, &s, &out_dir),
    }
}

pub fn history_table(history: &[EpochRecord]) -> String {
    let rows: Vec<(String, MetricsReport)> =
        history.iter().map(|h| (format!("epoch {}", h.epoch), h.eval.clone())).collect();
    format_table(&rows)
}

pub fn cmd_eval(ckpt: &Path, dataset: &Path, network: Network, how: Aggregation) -> CliResult<EvalOutput> {
    if !ckpt.is_file() {
        return Err(Failure::usage(format!("checkpoint {} not found", ckpt.display())));
    }
    let c = Checkpoint::load(ckpt)?;
    let data = Dataset::open(dataset)?;
    let dtype = match c.entries.iter().find(|(k, _)| k.starts_with("param.")).map(|(_, e)| &e.data) {
        Some(ppea::training::checkpoint::EntryData::F64(_)) => DType::F64,
        _ => DType::F32,
    };
    Ok(match dtype {
        DType::F32 => evaluate_dataset(&mut c.restore::<f32>()?, &data, network, 8, how)?,
        DType::F64 => evaluate_dataset(&mut c.restore::<f64>()?, &data, network, 8, how)?,
    })
}

pub fn cmd_gradcheck(seed: u64, fault: Option<Fault>) -> CliResult<Vec<CheckResult>> {
    Ok(full_suite(seed, fault)?)
}

pub fn gradcheck_table(results: &[CheckResult]) -> String {
    let w = results.iter().map(|r| r.name.len()).max().unwrap_or(2);
    let mut out = format!("{:<w$} {:>12} {:>10} {:>8}  status\n", "op", "max_rel_err", "tolerance", "checked");
    for r in results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        out.push_str(&format!("{:<w$} {:>12.3e} {:>10.0e} {:>8}  {status}\n", r.name, r.max_rel_error, r.tolerance, r.checked));
    }
    out
}

/// One row of the comparison table: the final evaluation of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run: String,
    pub stage: u8,
    pub history: Vec<EpochRecord>,
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Reads every `stage{N}.eval.json` in each run directory.
pub fn collect_runs(dirs: &[PathBuf]) -> CliResult<Vec<RunSummary>> {
    let mut out = Vec::new();
    for dir in dirs {
        if !dir.is_dir() {
            return Err(Failure::usage(format!("run directory {} not found", dir.display())));
        }
        let mut found = false;
        for stage in 1..=2u8 {
            let p = dir.join(format!("stage{stage}.eval.json"));
            if p.is_file() {
                let history: Vec<EpochRecord> = serde_json::from_str(&fs::read_to_string(&p)?)
                    .map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
                out.push(RunSummary { run: run_name(dir), stage, history });
                found = true;
            }
        }
        if !found {
            return Err(Failure::usage(format!("{} holds no stage*.eval.json", dir.display())));
        }
    }
    Ok(out)
}

pub const CSV_HEADER: &str = "run,stage,epoch,lr,mean_loss,abs_rel,sq_rel,rmse,rmse_log,d1,d2,d3";

/// Comparison table of each run's last stage (final epoch) and the CSV of
/// every evaluated epoch.
pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> CliResult<String> {
    let runs = collect_runs(dirs)?;
    let mut rows = Vec::new();
    for dir in dirs {
        let name = run_name(dir);
        if let Some(last) = runs.iter().filter(|r| r.run == name).max_by_key(|r| r.stage) {
            if let Some(h) = last.history.last() {
                rows.push((format!("{name} (stage {})", last.stage), h.eval.clone()));
            }
        }
    }
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &runs {
        for h in &r.history {
            let loss = h.mean_loss.map_or(String::new(), |l| l.to_string());
            let metrics: Vec<String> = h.eval.values().iter().map(|v| v.to_string()).collect();
            csv.push_str(&format!("{},{},{},{},{},{}\n", r.run, r.stage, h.epoch, h.lr, loss, metrics.join(",")));
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, csv)?;
    Ok(format_table(&rows))
}
