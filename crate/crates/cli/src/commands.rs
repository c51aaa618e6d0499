//! What each subcommand does, independent of argument parsing.

use std::fs;
use std::path::{Path, PathBuf};

use rcs_core::analysis::{coreset_points, imbalance_ratio, linear_probe, mmd, selection_frequency, ProbeConfig, ProbeReport};
use rcs_core::autodiff::Tensor;
use rcs_core::data::{gen_synthetic, read_dataset, split_validation, write_dataset, Dataset, MinibatchPartition};
use rcs_core::divergence::rd_set;
use rcs_core::model::{read_checkpoint, write_checkpoint, Model};
use rcs_core::selection::{
    chunked_select, exhaustive_oracle, greedy_with_budget, random_select, rcs_greedy, selection_budget,
    verify_guarantee, CoresetResult, GainEvaluator, GuaranteeParams, GuaranteeReport, OracleResult,
};
use rcs_core::trainer::{pretrain, save_epochs_csv, selection_objective, speedup_report, SelectionMethod, SpeedupReport};
use rcs_core::{rng, Error};

use crate::config::{ConfigError, ExperimentConfig, RawConfig};

/// Failure of a subcommand, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration (exit code 1).
    Usage(String),
    /// Anything that went wrong while running (exit code 2).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.0)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Reads an optional config file and applies overrides in order.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> CliResult<ExperimentConfig> {
    let mut raw = match path {
        Some(p) => RawConfig::load(p).map_err(|e| match e {
            crate::config::LoadError::Io(p, e) => io_err(&p, e),
            crate::config::LoadError::Config(c) => CliError::Usage(format!("{}: {}", p.display(), c.0)),
        })?,
        None => RawConfig::default(),
    };
    for (k, v) in overrides {
        raw.set(k, v)?;
    }
    Ok(raw.resolve()?)
}

/// The training split and the held-out validation features `U`.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub full: Dataset,
    pub train: Dataset,
    pub validation: Tensor,
}

pub fn dataset_for(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    Ok(match &cfg.data.path {
        Some(p) => read_dataset(p)?,
        None => {
            let d = gen_synthetic(&cfg.data.spec)?;
            if cfg.data.labeled {
                d
            } else {
                d.unlabeled()
            }
        }
    })
}

pub fn load_data(cfg: &ExperimentConfig) -> CliResult<LoadedData> {
    let full = dataset_for(cfg)?;
    let (train, val) = split_validation(full.len(), cfg.data.validation, cfg.data.spec.seed)?;
    Ok(LoadedData {
        train: full.subset(&train),
        validation: full.features().select_rows(&val),
        full,
    })
}

pub fn init_model(cfg: &ExperimentConfig, data: &LoadedData) -> CliResult<Model> {
    let classes = data.full.classes().max(1);
    Ok(Model::new(cfg.encoder(data.full.dim(), classes))?)
}

fn model_for(cfg: &ExperimentConfig, data: &LoadedData, checkpoint: Option<&Path>) -> CliResult<Model> {
    match checkpoint {
        Some(p) => Ok(read_checkpoint(p)?),
        None => init_model(cfg, data),
    }
}

fn labels_for<'a>(cfg: &ExperimentConfig, data: &'a LoadedData) -> CliResult<Option<&'a [usize]>> {
    if !cfg.train.mode.is_supervised() {
        return Ok(None);
    }
    data.train
        .labels()
        .map(Some)
        .ok_or_else(|| CliError::Usage(format!("train.mode = {} needs a labeled dataset", cfg.train.mode.as_str())))
}

pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> CliResult<Dataset> {
    let d = gen_synthetic(&cfg.data.spec)?;
    let d = if cfg.data.labeled { d } else { d.unlabeled() };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    write_dataset(out, &d)?;
    Ok(d)
}

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub dir: PathBuf,
    pub report: SpeedupReport,
    pub final_rd: f64,
    pub epochs: usize,
    pub rounds: usize,
}

/// Trains and writes the run directory: `config.snapshot`, `epochs.csv`,
/// one `coreset_<epoch>.csv` per selection round, `summary.csv` and
/// `model_final.rcsm`.
pub fn cmd_pretrain(cfg: &ExperimentConfig, dir: &Path) -> CliResult<PretrainSummary> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let snap = dir.join("config.snapshot");
    fs::write(&snap, cfg.snapshot()).map_err(|e| io_err(&snap, e))?;
    let data = load_data(cfg)?;
    let model = init_model(cfg, &data)?;
    let out = pretrain(model, &data.train, &data.validation, &cfg.train)?;
    let report = speedup_report(&out, data.train.len(), &cfg.train)?;
    save_epochs_csv(&dir.join("epochs.csv"), &out.records)?;
    for round in &out.coresets {
        round.result.save_csv(&dir.join(format!("coreset_{}.csv", round.epoch)))?;
    }
    let summary = format!(
        "key,value\ntrain_steps,{}\nselection_grad_evals,{}\nactual_grad_evals,{}\npredicted_grad_evals,{}\n\
         full_set_grad_evals,{}\neval_speedup,{}\n",
        report.train_steps, report.selection_grad_evals, report.actual, report.predicted, report.full_set, report.eval_speedup
    );
    let sp = dir.join("summary.csv");
    fs::write(&sp, summary).map_err(|e| io_err(&sp, e))?;
    write_checkpoint(&dir.join("model_final.rcsm"), &out.model)?;
    Ok(PretrainSummary {
        dir: dir.to_path_buf(),
        report,
        final_rd: out.records.last().map_or(f64::NAN, |r| r.rd_u),
        epochs: out.records.len(),
        rounds: out.coresets.len(),
    })
}

/// One selection round at the initial or checkpointed model.
pub fn cmd_select(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> CliResult<CoresetResult> {
    let data = load_data(cfg)?;
    let model = model_for(cfg, &data, checkpoint)?;
    let t = &cfg.train;
    let partition = MinibatchPartition::new(data.train.len(), t.batch_size, t.seed)?;
    let k = t.schedule.fraction;
    match t.method {
        SelectionMethod::Full => Err(CliError::Usage("selection.method = full selects nothing; use rcs or random".into())),
        SelectionMethod::Random => Ok(random_select(
            partition.num_batches(),
            partition.num_points(),
            partition.batch_size(),
            k,
            rng::derive_seed(t.seed, rng::tags::RANDOM_SELECT, 0),
            partition.fingerprint(),
        )?),
        SelectionMethod::Rcs => {
            let labels = labels_for(cfg, &data)?;
            let snapshot = model.snapshot();
            let rd = t.rd_config()?;
            let obj = selection_objective(
                &snapshot,
                data.train.features(),
                labels,
                &data.validation,
                &partition,
                t,
                0,
                &rd,
                &t.selection_attack()?,
            )?;
            let eta = t.schedule.selection_lr;
            Ok(match t.chunk {
                Some(c) => chunked_select(&obj, k, eta, c)?,
                None => rcs_greedy(&obj, k, eta)?,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleSummary {
    pub budget: usize,
    pub greedy: CoresetResult,
    pub oracle: OracleResult,
    pub report: GuaranteeReport,
}

/// Greedy against exhaustive search on the configured instance.
pub fn cmd_oracle(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    budget: Option<usize>,
    cap: u128,
) -> CliResult<OracleSummary> {
    let data = load_data(cfg)?;
    let model = model_for(cfg, &data, checkpoint)?;
    let t = &cfg.train;
    let partition = MinibatchPartition::new(data.train.len(), t.batch_size, t.seed)?;
    let labels = labels_for(cfg, &data)?;
    let snapshot = model.snapshot();
    let rd = t.rd_config()?;
    let obj = selection_objective(
        &snapshot,
        data.train.features(),
        labels,
        &data.validation,
        &partition,
        t,
        0,
        &rd,
        &t.selection_attack()?,
    )?;
    let budget = match budget {
        Some(b) => b,
        None => selection_budget(partition.num_points(), partition.batch_size(), t.schedule.fraction)?,
    };
    let eta = t.schedule.selection_lr;
    let ev = GainEvaluator::new(&obj, eta)?;
    let greedy = greedy_with_budget(&obj, budget, eta)?;
    let oracle = exhaustive_oracle(&ev, budget, cap)?;
    let params = GuaranteeParams::empirical(&ev, budget)?;
    let report = verify_guarantee(&ev, &greedy, &oracle, &params)?;
    Ok(OracleSummary {
        budget,
        greedy,
        oracle,
        report,
    })
}

/// Per-run analysis results.
#[derive(Debug, Clone)]
pub struct RunAnalysis {
    pub dir: PathBuf,
    pub rounds: Vec<RoundAnalysis>,
    pub logged_rd: f64,
    pub recomputed_rd: f64,
    pub frequency: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RoundAnalysis {
    pub epoch: usize,
    pub batches: usize,
    pub points: usize,
    pub mmd: f64,
    /// `None` for unlabeled data.
    pub imbalance: Option<f64>,
    pub missing_classes: usize,
}

impl RunAnalysis {
    pub fn mean_mmd(&self) -> f64 {
        if self.rounds.is_empty() {
            return f64::NAN;
        }
        self.rounds.iter().map(|r| r.mmd).sum::<f64>() / self.rounds.len() as f64
    }
}

fn read_csv_column(path: &Path, column: &str) -> CliResult<Vec<String>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let headers = r.headers().map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?.clone();
    let idx = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| CliError::Runtime(format!("{}: no `{column}` column", path.display())))?;
    r.records()
        .map(|rec| {
            rec.map(|r| r.get(idx).unwrap_or("").to_string())
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Coreset files of a run as `(epoch, path)`, sorted by epoch.
fn coreset_files(dir: &Path) -> CliResult<Vec<(usize, PathBuf)>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(e) = name.strip_prefix("coreset_").and_then(|s| s.strip_suffix(".csv")) {
            if let Ok(epoch) = e.parse::<usize>() {
                files.push((epoch, entry.path()));
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Recomputes diagnostics of a finished run and writes `analysis.csv` and
/// `frequency.csv` into its directory.
pub fn cmd_analyze(dir: &Path) -> CliResult<RunAnalysis> {
    let snap = dir.join("config.snapshot");
    let cfg = RawConfig::load(&snap)
        .map_err(|e| match e {
            crate::config::LoadError::Io(p, e) => io_err(&p, e),
            crate::config::LoadError::Config(c) => CliError::Runtime(format!("{}: {}", snap.display(), c.0)),
        })?
        .resolve()
        .map_err(|e| CliError::Runtime(format!("{}: {}", snap.display(), e.0)))?;
    let data = load_data(&cfg)?;
    let t = &cfg.train;
    let partition = MinibatchPartition::new(data.train.len(), t.batch_size, t.seed)?;
    let nb = partition.num_batches();
    let features = data.train.features();
    let mut results = Vec::new();
    let mut rounds = Vec::new();
    for (epoch, path) in coreset_files(dir)? {
        let ids = read_csv_column(&path, "batch_id")?
            .iter()
            .map(|s| s.parse::<usize>().ok().filter(|&b| b < nb))
            .collect::<Option<Vec<usize>>>()
            .ok_or_else(|| CliError::Runtime(format!("{}: batch ids outside 0..{nb}", path.display())))?;
        let result = CoresetResult {
            gains: vec![f64::NAN; ids.len()],
            cumulative_evals: vec![0; ids.len()],
            selected: ids,
            grad_evals: 0,
            wall_time: Default::default(),
            theta_drift: 0.0,
            num_batches: nb,
            partition_fingerprint: partition.fingerprint(),
        };
        let pts = coreset_points(&result, &partition)?;
        let m = mmd(&features.select_rows(&pts), features, None)?;
        let imb = match data.train.labels() {
            Some(y) => {
                let ys: Vec<usize> = pts.iter().map(|&i| y[i]).collect();
                Some(imbalance_ratio(&ys, data.train.classes())?)
            }
            None => None,
        };
        rounds.push(RoundAnalysis {
            epoch,
            batches: result.selected.len(),
            points: pts.len(),
            mmd: m,
            imbalance: imb.as_ref().map(|i| i.ratio),
            missing_classes: imb.map_or(0, |i| i.missing_classes.len()),
        });
        results.push(result);
    }
    let frequency = selection_frequency(&results, &partition)?;

    let logged = read_csv_column(&dir.join("epochs.csv"), "rd_u")?;
    let logged_rd = logged
        .last()
        .and_then(|s| s.parse::<f64>().ok())
        .ok_or_else(|| CliError::Runtime(format!("{}: no logged RD", dir.join("epochs.csv").display())))?;
    let model = read_checkpoint(&dir.join("model_final.rcsm"))?;
    let recomputed_rd = rd_set(&model, &data.validation, &t.rd_config()?)?;

    let mut text = String::from("epoch,batches,points,mmd,imbalance,missing_classes\n");
    for r in &rounds {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.batches,
            r.points,
            r.mmd,
            r.imbalance.map_or(String::new(), |v| v.to_string()),
            r.missing_classes
        ));
    }
    let ap = dir.join("analysis.csv");
    fs::write(&ap, text).map_err(|e| io_err(&ap, e))?;
    let mut freq = String::from("point,count\n");
    for (i, c) in frequency.iter().enumerate() {
        freq.push_str(&format!("{i},{c}\n"));
    }
    let fp = dir.join("frequency.csv");
    fs::write(&fp, freq).map_err(|e| io_err(&fp, e))?;
    Ok(RunAnalysis {
        dir: dir.to_path_buf(),
        rounds,
        logged_rd,
        recomputed_rd,
        frequency,
    })
}

/// Linear probe of a checkpoint's embeddings on a labeled dataset.
pub fn cmd_probe(cfg: &ExperimentConfig, checkpoint: &Path, data: Option<&Path>) -> CliResult<ProbeReport> {
    let model = read_checkpoint(checkpoint)?;
    let ds = match data {
        Some(p) => read_dataset(p)?,
        None => dataset_for(cfg)?,
    };
    if ds.labels().is_none() {
        return Err(CliError::Usage("probe needs a labeled dataset".into()));
    }
    let pc = ProbeConfig {
        test_fraction: cfg.probe_test_fraction,
        seed: cfg.seed,
        ..ProbeConfig::default()
    };
    Ok(linear_probe(&model, &ds, &pc)?)
}
