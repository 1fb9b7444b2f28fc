use std::path::{Path, PathBuf};

use clap::Args;
use gqa_core::grouping::{GroupingMode, SearchConfig};
use gqa_core::pruning::TrainSchedule;
use gqa_core::similarity::Criterion;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a pipeline stage may need. Loaded from TOML, then overridden
/// by whichever flags were given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    /// Distillation data for pruning; the calibration file when unset.
    pub train_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub groups: usize,
    pub criterion: Criterion,
    pub grouping: GroupingMode,
    /// Fuse Procrustes alignments; `false` only regroups (the baseline).
    pub align: bool,
    pub seed: u64,
    pub search: SearchConfig,
    pub schedule: TrainSchedule,
    pub verify_sequences: usize,
    pub verify_seq_len: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: None,
            calibration: None,
            train_data: None,
            out_dir: PathBuf::from("gqa-out"),
            groups: 4,
            criterion: Criterion::Cos,
            grouping: GroupingMode::Default,
            align: true,
            seed: 0,
            search: SearchConfig::default(),
            schedule: TrainSchedule::default(),
            verify_sequences: 32,
            verify_seq_len: 16,
        }
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML pipeline config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Source MHA checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Token file, one sequence per line.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Number of KV heads after conversion.
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long, value_parser = ["cos", "dist"])]
    pub criterion: Option<String>,
    #[arg(long, value_parser = ["default", "key", "value"])]
    pub grouping: Option<String>,
    /// Skip alignment and only regroup heads.
    #[arg(long)]
    pub no_align: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Mask-transfer training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub search_epochs: Option<usize>,
    #[arg(long)]
    pub search_iters: Option<usize>,
    /// Worker thread cap.
    #[arg(long)]
    pub threads: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => PipelineConfig::default(),
        };
        let seed_given = self.seed.is_some();
        if let Some(p) = &self.model {
            cfg.model = Some(p.clone());
        }
        if let Some(p) = &self.calibration {
            cfg.calibration = Some(p.clone());
        }
        if let Some(p) = &self.train_data {
            cfg.train_data = Some(p.clone());
        }
        if let Some(p) = &self.out_dir {
            cfg.out_dir = p.clone();
        }
        if let Some(g) = self.groups {
            cfg.groups = g;
        }
        if let Some(c) = &self.criterion {
            cfg.criterion = c.parse().map_err(CliError::from)?;
        }
        if let Some(g) = &self.grouping {
            cfg.grouping = g.parse().map_err(CliError::from)?;
        }
        if self.no_align {
            cfg.align = false;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.schedule.total_steps = s;
        }
        if let Some(e) = self.search_epochs {
            cfg.search.epochs = e;
        }
        if let Some(i) = self.search_iters {
            cfg.search.max_iter = i;
        }
        if seed_given || self.config.is_none() {
            // one top-level seed drives every stage unless the file pins them
            cfg.search.rng_seed = cfg.seed;
            cfg.schedule.seed = cfg.seed;
        }
        if cfg.groups == 0 {
            return Err(CliError::Usage("--groups must be at least 1".into()));
        }
        Ok(cfg)
    }
}

fn load_config(path: &Path) -> Result<PipelineConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

impl PipelineConfig {
    pub fn model_path(&self) -> Result<&Path, CliError> {
        self.model
            .as_deref()
            .ok_or_else(|| CliError::Usage("no model given (--model or config `model`)".into()))
    }

    pub fn calibration_path(&self) -> Result<&Path, CliError> {
        self.calibration.as_deref().ok_or_else(|| {
            CliError::Usage("no calibration tokens given (--calibration or config `calibration`)".into())
        })
    }

    pub fn train_path(&self) -> Result<&Path, CliError> {
        match &self.train_data {
            Some(p) => Ok(p),
            None => self.calibration_path(),
        }
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}
