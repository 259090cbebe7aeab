//! Config-driven experiments: data generation, training, evaluation,
//! ablations and grid sweeps, with their on-disk outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{generate, split, CsvView, Dataset, Partition};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::trainer::{evaluate_state, train, CHECKPOINT_FILE};

pub const CONFIG_FILE: &str = "config.toml";
pub const DATASET_FILE: &str = "dataset.csv";
pub const TRAINER_VIEW_FILE: &str = "dataset_trainer.csv";
pub const SPLIT_FILE: &str = "split.json";
pub const EVAL_FILE: &str = "eval.json";
pub const AFFINITY_FILE: &str = "affinity.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";
pub const SWEEP_CSV: &str = "sweep.csv";

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Serde(e.to_string()))
}

/// Generated data plus its split, or the dataset named in the config with
/// the partition recovered from its labeled flags.
pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<(Dataset, Partition)> {
    match &cfg.dataset_path {
        Some(path) => {
            let ds = Dataset::load_csv(path)?;
            let part = Partition::from_flags(&ds)?;
            Ok((ds, part))
        }
        None => {
            let (mut ds, _) = generate(&cfg.hierarchy(), cfg.seed)?;
            let part = split(&mut ds, &cfg.split_spec())?;
            Ok((ds, part))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub num_instances: usize,
    pub num_classes: usize,
    pub num_super: usize,
    pub seen_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub class_to_super: Vec<usize>,
    pub num_labeled: usize,
    pub num_unlabeled: usize,
    pub novel_ratio: f64,
    pub label_ratio: f64,
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<SplitManifest> {
    let (ds, part) = load_or_generate(cfg)?;
    mkdir(out)?;
    ds.save_csv(out.join(DATASET_FILE), CsvView::Full)?;
    ds.save_csv(out.join(TRAINER_VIEW_FILE), CsvView::Trainer)?;
    let manifest = SplitManifest {
        seed: cfg.seed,
        num_instances: ds.instances.len(),
        num_classes: ds.num_classes,
        num_super: ds.num_super,
        seen_classes: part.seen_classes(),
        novel_classes: part.novel_classes(),
        class_to_super: ds.class_to_super(),
        num_labeled: part.labeled.len(),
        num_unlabeled: part.unlabeled.len(),
        novel_ratio: cfg.novel_ratio,
        label_ratio: cfg.label_ratio,
    };
    write(&out.join(SPLIT_FILE), &to_json(&manifest)?)?;
    cfg.save(out.join(CONFIG_FILE))?;
    Ok(manifest)
}

/// Trains one run and writes metrics, checkpoint, final evaluation,
/// relation affinities and the effective config into `out`.
pub fn train_run(cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    let (ds, part) = load_or_generate(cfg)?;
    mkdir(out)?;
    cfg.save(out.join(CONFIG_FILE))?;
    let result = train(&cfg.train_config(), &ds, &part, Some(out))?;
    write(&out.join(EVAL_FILE), &to_json(&result.report)?)?;
    result.state.relation.save_affinity_csv(out.join(AFFINITY_FILE))?;
    Ok(result.report)
}

/// Trains without touching the filesystem.
pub fn train_in_memory(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let (ds, part) = load_or_generate(cfg)?;
    Ok(train(&cfg.train_config(), &ds, &part, None)?.report)
}

/// Means over runs. Optional accuracies average the runs that report them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanAcc {
    pub acc_all: f64,
    pub acc_seen: Option<f64>,
    pub acc_novel: Option<f64>,
    pub acc_coarse_mapped: Option<f64>,
}

impl MeanAcc {
    pub fn of(reports: &[EvalReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let opt = |f: fn(&EvalReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            acc_all: reports.iter().map(|r| r.acc_all).sum::<f64>() / n,
            acc_seen: opt(|r| r.acc_seen),
            acc_novel: opt(|r| r.acc_novel),
            acc_coarse_mapped: opt(|r| r.acc_coarse_mapped),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedSummary {
    pub seeds: Vec<u64>,
    pub mean: MeanAcc,
    pub runs: Vec<EvalReport>,
}

pub fn seed_range(first: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| first + i).collect()
}

/// Trains one run per seed, in `out/seed_<s>` when more than one seed is
/// given, and writes a summary with the mean accuracies.
pub fn train_seeds(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<MultiSeedSummary> {
    if seeds.len() == 1 {
        let report = train_run(&cfg.with_seed(seeds[0]), out)?;
        return Ok(MultiSeedSummary {
            seeds: seeds.to_vec(),
            mean: MeanAcc::of(std::slice::from_ref(&report)),
            runs: vec![report],
        });
    }
    mkdir(out)?;
    cfg.save(out.join(CONFIG_FILE))?;
    let mut runs = Vec::with_capacity(seeds.len());
    for &s in seeds {
        runs.push(train_run(&cfg.with_seed(s), &out.join(format!("seed_{s}")))?);
    }
    let summary = MultiSeedSummary {
        seeds: seeds.to_vec(),
        mean: MeanAcc::of(&runs),
        runs,
    };
    write(&out.join(SUMMARY_FILE), &to_json(&summary)?)?;
    Ok(summary)
}

/// Evaluates a checkpoint on the unlabeled rows of a full-view dataset CSV.
pub fn eval_checkpoint(checkpoint: &Path, dataset: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = Dataset::load_csv(dataset)?;
    if ds.dim != ck.state.encoder.input_dim() || ds.num_classes != ck.state.target.len() {
        return Err(Error::Contract(format!(
            "checkpoint expects dim {} and {} classes, dataset has dim {} and {} classes",
            ck.state.encoder.input_dim(),
            ck.state.target.len(),
            ds.dim,
            ds.num_classes
        )));
    }
    let part = Partition::from_flags(&ds)?;
    evaluate_state(&ck.state, &ds, &part)
}

/// Parses an `instance_id,pred` CSV.
pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l.trim());
    if header != Some("instance_id,pred") {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "expected header `instance_id,pred`".into(),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let mut cols = line.split(',').map(str::trim);
        let (Some(id), Some(pred), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(bad(format!("expected 2 columns in {line:?}")));
        };
        let id = id.parse().map_err(|_| bad(format!("bad instance_id {id:?}")))?;
        let pred = pred.parse().map_err(|_| bad(format!("bad pred {pred:?}")))?;
        out.push((id, pred));
    }
    Ok(out)
}

/// Evaluates externally produced predictions against a full-view dataset.
/// A class counts as seen when the dataset has a labeled instance of it.
pub fn eval_predictions(preds: &Path, dataset: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(preds).map_err(|e| Error::io(preds, e))?;
    let rows = parse_predictions(&text, preds)?;
    let ds = Dataset::load_csv(dataset)?;
    let part = Partition::from_flags(&ds)?;
    let mut p = Vec::with_capacity(rows.len());
    let mut t = Vec::with_capacity(rows.len());
    for (id, pred) in rows {
        let inst = ds.instances.get(id).ok_or_else(|| {
            Error::Contract(format!("instance_id {id} out of range for {} rows", ds.instances.len()))
        })?;
        p.push(pred);
        t.push(inst.target);
    }
    let seen: Vec<bool> = t.iter().map(|&c| part.seen[c]).collect();
    evaluate(&p, &t, &seen, ds.num_classes, &ds.class_to_super())
}

pub const ABLATION_VARIANTS: [(&str, bool, bool); 3] =
    [("target_only", false, false), ("cgm", true, false), ("full", true, true)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean: MeanAcc,
    /// Difference of mean accuracies from the `target_only` row.
    pub delta_all: f64,
    pub delta_seen: Option<f64>,
    pub delta_novel: Option<f64>,
    pub runs: Vec<EvalReport>,
}

pub fn ablation_config(cfg: &ExperimentConfig, cgm: bool, kdm: bool) -> ExperimentConfig {
    ExperimentConfig {
        enable_cgm: cgm,
        enable_kdm: kdm,
        ..cfg.clone()
    }
}

/// Runs the three variants on the same data and seeds.
pub fn ablate(cfg: &ExperimentConfig, seeds: &[u64], out: Option<&Path>) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> = Vec::with_capacity(3);
    for (name, cgm, kdm) in ABLATION_VARIANTS {
        let variant = ablation_config(cfg, cgm, kdm);
        let mut runs = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let c = variant.with_seed(s);
            runs.push(match out {
                Some(dir) => train_run(&c, &dir.join(name).join(format!("seed_{s}")))?,
                None => train_in_memory(&c)?,
            });
        }
        let mean = MeanAcc::of(&runs);
        let base = rows.first().map_or(mean, |r| r.mean);
        let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
        rows.push(AblationRow {
            variant: name.to_string(),
            mean,
            delta_all: mean.acc_all - base.acc_all,
            delta_seen: diff(mean.acc_seen, base.acc_seen),
            delta_novel: diff(mean.acc_novel, base.acc_novel),
            runs,
        });
    }
    if let Some(dir) = out {
        mkdir(dir)?;
        cfg.save(dir.join(CONFIG_FILE))?;
        write(&dir.join(ABLATION_CSV), &ablation_csv(&rows))?;
        write(&dir.join(ABLATION_JSON), &to_json(&rows)?)?;
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "variant,acc_all,acc_seen,acc_novel,acc_coarse_mapped,delta_all,delta_seen,delta_novel\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:?},{},{},{},{:?},{},{}",
            r.variant,
            r.mean.acc_all,
            fmt_opt(r.mean.acc_seen),
            fmt_opt(r.mean.acc_novel),
            fmt_opt(r.mean.acc_coarse_mapped),
            r.delta_all,
            fmt_opt(r.delta_seen),
            fmt_opt(r.delta_novel)
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepParams {
    pub lambda_c: f64,
    pub lambda_t2c: f64,
    pub num_coarse: usize,
    pub coarse_start: u32,
    pub coarse_end: u32,
    pub distill_start: u32,
    pub distill_end: u32,
}

impl SweepParams {
    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        ExperimentConfig {
            lambda_c: self.lambda_c,
            lambda_t2c: self.lambda_t2c,
            num_coarse: Some(self.num_coarse),
            coarse_start: self.coarse_start,
            coarse_end: self.coarse_end,
            distill_start: self.distill_start,
            distill_end: self.distill_end,
            ..cfg.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub params: SweepParams,
    pub mean: Option<MeanAcc>,
    pub error: Option<String>,
}

/// Cartesian product of the sweep lists; an empty list stands for the
/// config's own value.
pub fn sweep_grid(cfg: &ExperimentConfig) -> Vec<SweepParams> {
    fn or<T: Copy>(v: &[T], d: T) -> Vec<T> {
        if v.is_empty() {
            vec![d]
        } else {
            v.to_vec()
        }
    }
    let mut cells = Vec::new();
    for &lambda_c in &or(&cfg.sweep_lambda_c, cfg.lambda_c) {
        for &lambda_t2c in &or(&cfg.sweep_lambda_t2c, cfg.lambda_t2c) {
            for &num_coarse in &or(&cfg.sweep_num_coarse, cfg.model_num_coarse()) {
                for &coarse_start in &or(&cfg.sweep_coarse_start, cfg.coarse_start) {
                    for &coarse_end in &or(&cfg.sweep_coarse_end, cfg.coarse_end) {
                        for &distill_start in &or(&cfg.sweep_distill_start, cfg.distill_start) {
                            for &distill_end in &or(&cfg.sweep_distill_end, cfg.distill_end) {
                                cells.push(SweepParams {
                                    lambda_c,
                                    lambda_t2c,
                                    num_coarse,
                                    coarse_start,
                                    coarse_end,
                                    distill_start,
                                    distill_end,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    cells
}

/// One run per grid cell and seed. A failing cell is recorded with its
/// error and the sweep moves on.
pub fn sweep(cfg: &ExperimentConfig, seeds: &[u64], out: Option<&Path>) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for (i, params) in sweep_grid(cfg).into_iter().enumerate() {
        let cell_cfg = params.apply(cfg);
        let result = cell_cfg.validate().and_then(|_| {
            seeds
                .iter()
                .map(|&s| {
                    let c = cell_cfg.with_seed(s);
                    match out {
                        Some(dir) => train_run(&c, &dir.join(format!("cell_{i}")).join(format!("seed_{s}"))),
                        None => train_in_memory(&c),
                    }
                })
                .collect::<Result<Vec<_>>>()
        });
        cells.push(match result {
            Ok(runs) => SweepCell {
                params,
                mean: Some(MeanAcc::of(&runs)),
                error: None,
            },
            Err(e) => SweepCell {
                params,
                mean: None,
                error: Some(e.to_string()),
            },
        });
    }
    if let Some(dir) = out {
        mkdir(dir)?;
        cfg.save(dir.join(CONFIG_FILE))?;
        write(&dir.join(SWEEP_CSV), &sweep_csv(&cells))?;
    }
    Ok(cells)
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut s = String::from(
        "lambda_c,lambda_t2c,num_coarse,coarse_start,coarse_end,distill_start,distill_end,\
         acc_all,acc_seen,acc_novel,acc_coarse_mapped,error\n",
    );
    for c in cells {
        let p = &c.params;
        let m = c.mean;
        let _ = writeln!(
            s,
            "{:?},{:?},{},{},{},{},{},{},{},{},{},{}",
            p.lambda_c,
            p.lambda_t2c,
            p.num_coarse,
            p.coarse_start,
            p.coarse_end,
            p.distill_start,
            p.distill_end,
            fmt_opt(m.map(|m| m.acc_all)),
            fmt_opt(m.and_then(|m| m.acc_seen)),
            fmt_opt(m.and_then(|m| m.acc_novel)),
            fmt_opt(m.and_then(|m| m.acc_coarse_mapped)),
            c.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        );
    }
    s
}

pub fn report_json(report: &EvalReport) -> Result<String> {
    to_json(report)
}

/// Path of the checkpoint a training run writes into `out`.
pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join(CHECKPOINT_FILE)
}
