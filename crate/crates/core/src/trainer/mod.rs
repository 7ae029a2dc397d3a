//! Loss assembly, the dual-optimizer pretraining step, fine-tuning,
//! evaluation, checkpoints and the staged curriculum.

pub mod checkpoint;
pub mod curriculum;
pub mod data;
pub mod eval;
pub mod finetune;
pub mod losses;
pub mod optim;
pub mod step;

use serde::{Deserialize, Serialize};

use crate::amn::AmnConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::student::{Student, StudentConfig};
use crate::synthdata::{CurriculumSchedule, DomainShift};
use crate::teacher::TeacherConfig;
use crate::tensor::{Real, RngStream};
use crate::amn::Amn;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use curriculum::{run_curriculum, CurriculumReport, EpochRow, RunOptions, StageEval, CSV_HEADER};
pub use data::{Datasets, InputMode, LabeledClip, Prepared};
pub use eval::{evaluate, predict_clip, EvalReport};
pub use finetune::{finetune, FinetuneReport};
pub use optim::{clip_global_norm, global_norm, lr_at, AdamW, AdamWConfig};
pub use step::{pretrain_step, StepRecord};

/// Random stream ids. Each is offset by a step or epoch counter so that any
/// point of a run can be resumed from counters alone.
pub mod streams {
    pub const SHUFFLE: u64 = 2 << 40;
    pub const MASK: u64 = 3 << 40;
    pub const DROPOUT: u64 = 4 << 40;
    pub const DOMAIN: u64 = 5 << 40;
    pub const FT_SHUFFLE: u64 = 6 << 40;
    pub const FT_DROPOUT: u64 = 7 << 40;
    pub const INIT_STUDENT: u64 = 8 << 40;
    pub const INIT_AMN: u64 = 9 << 40;
    pub const OCC_EVAL: u64 = 10 << 40;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_mae: f64,
    /// Weight of the correlation term inside the reconstruction loss.
    pub lambda_corr: f64,
    pub lambda_dist: f64,
    pub beta: f64,
    pub alpha: f64,
    pub lambda_hr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mae: 1.0,
            lambda_corr: 1.0,
            lambda_dist: 1.0,
            beta: 2.0,
            alpha: 1.0,
            lambda_hr: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_mae,
            self.lambda_corr,
            self.lambda_dist,
            self.beta,
            self.alpha,
            self.lambda_hr,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskingStrategy {
    Adaptive,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub masking: MaskingStrategy,
    /// Windows per step.
    pub batch_size: usize,
    pub lr_student: f64,
    pub lr_amn: f64,
    pub warmup_epochs: f64,
    pub clip_norm: f64,
    pub adamw: AdamWConfig,
    /// Start offset between consecutive training windows of a clip.
    pub window_stride: usize,
    /// Leaves the AMN untouched (scores still drive masking).
    pub freeze_amn: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            masking: MaskingStrategy::Adaptive,
            batch_size: 8,
            lr_student: 1e-3,
            lr_amn: 1e-5,
            warmup_epochs: 1.0,
            clip_norm: 1.0,
            adamw: AdamWConfig::default(),
            window_stride: 32,
            freeze_amn: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Clean,
    Occluded,
    DomainShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: usize,
    pub epochs: usize,
    pub regime: Regime,
}

impl StageConfig {
    /// The three desk-scale stages: clean, occluded, domain-shifted.
    pub fn desk() -> Vec<StageConfig> {
        vec![
            StageConfig {
                stage: 1,
                epochs: 30,
                regime: Regime::Clean,
            },
            StageConfig {
                stage: 2,
                epochs: 50,
                regime: Regime::Occluded,
            },
            StageConfig {
                stage: 3,
                epochs: 40,
                regime: Regime::DomainShift,
            },
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Smallest validation MAE improvement (bpm) that resets patience.
    pub min_delta: f64,
    /// Clips per step.
    pub batch_size: usize,
    pub clip_norm: f64,
    pub adamw: AdamWConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            epochs: 100,
            patience: 10,
            min_delta: 0.1,
            batch_size: 8,
            clip_norm: 1.0,
            adamw: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub input: InputMode,
    pub student: StudentConfig,
    pub amn: AmnConfig,
    pub teacher: TeacherConfig,
    pub loss: LossWeights,
    pub pretrain: PretrainConfig,
    pub stages: Vec<StageConfig>,
    /// Occlusion ramp, in epochs counted from the start of the occluded stage.
    pub occlusion: CurriculumSchedule,
    pub domain_shift: DomainShift,
    pub finetune: FinetuneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            input: InputMode::Diff,
            student: StudentConfig::default(),
            amn: AmnConfig::default(),
            teacher: TeacherConfig::default(),
            loss: LossWeights::default(),
            pretrain: PretrainConfig::default(),
            stages: StageConfig::desk(),
            occlusion: CurriculumSchedule {
                ramp_start: 2.5,
                ramp_end: 7.5,
                ..CurriculumSchedule::default()
            },
            domain_shift: DomainShift::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.student.validate()?;
        self.loss.validate()?;
        let p = &self.pretrain;
        if !(p.mask_ratio > 0.0 && p.mask_ratio < 1.0) {
            return Err(Error::invalid(format!("mask ratio {} outside (0, 1)", p.mask_ratio)));
        }
        if !(p.lr_student > 0.0) || !(p.lr_amn > 0.0) || !(self.finetune.lr > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(p.clip_norm > 0.0) || !(self.finetune.clip_norm > 0.0) {
            return Err(Error::invalid("clip norm must be positive"));
        }
        if p.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if p.window_stride == 0 {
            return Err(Error::invalid("window stride must be positive"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(1..=3).contains(&s.stage) {
                return Err(Error::invalid(format!("stage {} outside 1..=3", s.stage)));
            }
            if i > 0 && s.stage <= self.stages[i - 1].stage {
                return Err(Error::invalid("stages must be listed in increasing order"));
            }
        }
        Ok(())
    }
}

/// Everything a run mutates: parameters, both optimizers and the counters
/// that key every random draw.
#[derive(Clone, Debug)]
pub struct TrainState<F: Real> {
    pub store: ParamStore<F>,
    pub student: Student,
    pub amn: Amn,
    pub opt_student: AdamW<F>,
    pub opt_amn: AdamW<F>,
    /// Epochs completed across all stages.
    pub epoch: usize,
    /// Index into `TrainConfig::stages` of the stage in progress.
    pub stage_index: usize,
    /// Epochs completed within that stage.
    pub stage_epoch: usize,
    /// Optimizer steps taken across all stages.
    pub step: u64,
}

impl<F: Real> TrainState<F> {
    /// Fresh parameters and optimizers, initialised from the config seed.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let student = Student::init(
            &cfg.student,
            &mut store,
            &mut RngStream::new(cfg.seed, streams::INIT_STUDENT),
        )?;
        let amn = Amn::init(
            &cfg.amn,
            &cfg.student.tubelet,
            &mut store,
            &mut RngStream::new(cfg.seed, streams::INIT_AMN),
        )?;
        let opt_student = AdamW::new(cfg.pretrain.adamw.clone(), &store, store.ids_with_prefix(&["student."]));
        let opt_amn = AdamW::new(cfg.pretrain.adamw.clone(), &store, store.ids_with_prefix(&["amn."]));
        Ok(Self {
            store,
            student,
            amn,
            opt_student,
            opt_amn,
            epoch: 0,
            stage_index: 0,
            stage_epoch: 0,
            step: 0,
        })
    }
}
