//! Flat `key = value` experiment configuration (TOML syntax), covering data
//! generation, the split, training, schedules and sweep grids.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{HierarchySpec, SplitSpec};
use crate::error::{Error, Result};
use crate::schedule::{RampSchedule, Schedules};
use crate::target::ContrastConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed for data generation, the split and training.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Train on this full-view CSV instead of generating data.
    pub dataset_path: Option<PathBuf>,

    pub num_super: usize,
    pub children_per_super: usize,
    pub dim: usize,
    pub coarse_spread: f64,
    pub fine_spread: f64,
    pub noise_sigma: f64,
    pub per_class: usize,
    pub novel_ratio: f64,
    pub label_ratio: f64,

    pub epochs: u32,
    pub batch_size: usize,
    pub labeled_fraction: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub cosine_decay: bool,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub num_coarse: Option<usize>,
    pub queue_capacity: usize,
    pub aug_strength: f64,
    pub relation_init_scale: f64,
    pub lr_mult_target: f64,
    pub lr_mult_coarse: f64,
    pub lr_mult_distill: f64,

    pub tau_sup: f64,
    pub tau_self: f64,
    pub lambda_bal: f64,
    pub eq2_literal: bool,
    pub proto_temperature: Option<f64>,

    pub coarse_start: u32,
    pub coarse_end: u32,
    pub lambda_c: f64,
    pub distill_start: u32,
    pub distill_end: u32,
    pub lambda_t2c: f64,

    pub enable_cgm: bool,
    pub enable_kdm: bool,
    pub symmetric_t2c: bool,

    pub sweep_lambda_c: Vec<f64>,
    pub sweep_lambda_t2c: Vec<f64>,
    pub sweep_num_coarse: Vec<usize>,
    pub sweep_coarse_start: Vec<u32>,
    pub sweep_coarse_end: Vec<u32>,
    pub sweep_distill_start: Vec<u32>,
    pub sweep_distill_end: Vec<u32>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_parts(
            0,
            PathBuf::from("runs/default"),
            &HierarchySpec::default(),
            &SplitSpec::default(),
            &TrainConfig::default(),
        )
    }
}

impl ExperimentConfig {
    pub fn from_parts(
        seed: u64,
        out_dir: PathBuf,
        data: &HierarchySpec,
        split: &SplitSpec,
        train: &TrainConfig,
    ) -> Self {
        let c = &train.contrast;
        let s = &train.schedules;
        Self {
            seed,
            out_dir,
            dataset_path: None,
            num_super: data.num_super,
            children_per_super: data.children_per_super,
            dim: data.dim,
            coarse_spread: data.coarse_spread,
            fine_spread: data.fine_spread,
            noise_sigma: data.noise_sigma,
            per_class: data.per_class,
            novel_ratio: split.novel_ratio,
            label_ratio: split.label_ratio,
            epochs: train.epochs,
            batch_size: train.batch_size,
            labeled_fraction: train.labeled_fraction,
            lr: train.lr,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            cosine_decay: train.cosine_decay,
            hidden_dim: train.hidden_dim,
            embed_dim: train.embed_dim,
            num_coarse: train.num_coarse,
            queue_capacity: train.queue_capacity,
            aug_strength: train.aug_strength,
            relation_init_scale: train.relation_init_scale,
            lr_mult_target: train.lr_mult_target,
            lr_mult_coarse: train.lr_mult_coarse,
            lr_mult_distill: train.lr_mult_distill,
            tau_sup: c.tau_sup,
            tau_self: c.tau_self,
            lambda_bal: c.lambda_bal,
            eq2_literal: c.eq2_literal,
            proto_temperature: c.proto_temperature,
            coarse_start: s.coarse.start,
            coarse_end: s.coarse.end,
            lambda_c: s.coarse.lambda_final,
            distill_start: s.distill.start,
            distill_end: s.distill.end,
            lambda_t2c: s.distill.lambda_final,
            enable_cgm: train.enable_cgm,
            enable_kdm: train.enable_kdm,
            symmetric_t2c: train.symmetric_t2c,
            sweep_lambda_c: Vec::new(),
            sweep_lambda_t2c: Vec::new(),
            sweep_num_coarse: Vec::new(),
            sweep_coarse_start: Vec::new(),
            sweep_coarse_end: Vec::new(),
            sweep_distill_start: Vec::new(),
            sweep_distill_end: Vec::new(),
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn hierarchy(&self) -> HierarchySpec {
        HierarchySpec {
            num_super: self.num_super,
            children_per_super: self.children_per_super,
            dim: self.dim,
            coarse_spread: self.coarse_spread,
            fine_spread: self.fine_spread,
            noise_sigma: self.noise_sigma,
            per_class: self.per_class,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            novel_ratio: self.novel_ratio,
            label_ratio: self.label_ratio,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            labeled_fraction: self.labeled_fraction,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            cosine_decay: self.cosine_decay,
            seed: self.seed,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            num_coarse: self.num_coarse,
            queue_capacity: self.queue_capacity,
            aug_strength: self.aug_strength,
            relation_init_scale: self.relation_init_scale,
            lr_mult_target: self.lr_mult_target,
            lr_mult_coarse: self.lr_mult_coarse,
            lr_mult_distill: self.lr_mult_distill,
            enable_cgm: self.enable_cgm,
            enable_kdm: self.enable_kdm,
            symmetric_t2c: self.symmetric_t2c,
            contrast: ContrastConfig {
                tau_sup: self.tau_sup,
                tau_self: self.tau_self,
                lambda_bal: self.lambda_bal,
                eq2_literal: self.eq2_literal,
                proto_temperature: self.proto_temperature,
            },
            schedules: Schedules {
                coarse: RampSchedule {
                    start: self.coarse_start,
                    end: self.coarse_end,
                    lambda_final: self.lambda_c,
                },
                distill: RampSchedule {
                    start: self.distill_start,
                    end: self.distill_end,
                    lambda_final: self.lambda_t2c,
                },
            },
        }
    }

    /// Super-class count the model uses.
    pub fn model_num_coarse(&self) -> usize {
        self.num_coarse.unwrap_or(self.num_super)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset_path.is_none() {
            self.hierarchy().validate()?;
        }
        self.split_spec().validate()?;
        self.train_config().validate()?;
        if self.model_num_coarse() < 2 {
            return Err(Error::Config("the model needs at least 2 super-classes".into()));
        }
        if self.sweep_num_coarse.iter().any(|&k| k < 2) {
            return Err(Error::Config("sweep_num_coarse entries must be at least 2".into()));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x >= 0.0);
        if !finite(&self.sweep_lambda_c) || !finite(&self.sweep_lambda_t2c) {
            return Err(Error::Config("sweep weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}
