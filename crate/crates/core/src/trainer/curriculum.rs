//! The staged pretraining loop with per-epoch history, stage-boundary
//! checkpoints and resume.

use std::fs;
use std::path::Path;

use super::checkpoint::{save_checkpoint, write_atomic, HISTORY};
use super::data::{all_windows, assemble, clean_set, occluded_set, permutation, prepare_epoch, Datasets, Prepared};
use super::eval::evaluate;
use super::optim::lr_at;
use super::step::{pretrain_step, StepRecord};
use super::{streams, StageConfig, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::signal::Metrics;
use crate::tensor::{Real, RngStream};

pub const CSV_HEADER: &str = "epoch,stage,lr_student,lr_amn,loss_pixel,loss_corr,loss_distill,loss_pg,\
grad_norm_student,grad_norm_amn,mask_ratio_observed,val_mae,val_rmse,val_r";

/// One line of the per-epoch history. Step quantities are epoch means.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub stage: usize,
    pub lr_student: f64,
    pub lr_amn: f64,
    pub loss_pixel: f64,
    pub loss_corr: f64,
    pub loss_distill: f64,
    pub loss_pg: f64,
    pub grad_norm_student: f64,
    pub grad_norm_amn: f64,
    pub mask_ratio_observed: f64,
    pub val: Metrics,
}

impl EpochRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.stage,
            self.lr_student,
            self.lr_amn,
            self.loss_pixel,
            self.loss_corr,
            self.loss_distill,
            self.loss_pg,
            self.grad_norm_student,
            self.grad_norm_amn,
            self.mask_ratio_observed,
            self.val.mae,
            self.val.rmse,
            self.val.r
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 14 {
            return Err(Error::invalid(format!("history line has {} fields, expected 14", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad number {:?} in history", f[i])))
        };
        let int = |i: usize| -> Result<usize> {
            f[i].parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad integer {:?} in history", f[i])))
        };
        Ok(Self {
            epoch: int(0)?,
            stage: int(1)?,
            lr_student: num(2)?,
            lr_amn: num(3)?,
            loss_pixel: num(4)?,
            loss_corr: num(5)?,
            loss_distill: num(6)?,
            loss_pg: num(7)?,
            grad_norm_student: num(8)?,
            grad_norm_amn: num(9)?,
            mask_ratio_observed: num(10)?,
            val: Metrics {
                mae: num(11)?,
                rmse: num(12)?,
                r: num(13)?,
            },
        })
    }
}

/// Evaluation of the model at the end of a stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageEval {
    pub stage: usize,
    pub clean: Metrics,
    pub occluded: Metrics,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CurriculumReport {
    pub rows: Vec<EpochRow>,
    pub stage_evals: Vec<StageEval>,
    /// Set when the run stopped at `RunOptions::max_epochs` before finishing.
    pub interrupted: bool,
}

impl CurriculumReport {
    pub fn csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Vec<EpochRow>> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::invalid("history does not start with the expected header"));
        }
        lines.filter(|l| !l.trim().is_empty()).map(EpochRow::parse).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions<'a> {
    /// Receives `history.csv`, `stage<k>/` checkpoints and `latest/`.
    pub out_dir: Option<&'a Path>,
    /// Also checkpoint to `latest/` every this many epochs.
    pub checkpoint_every: Option<usize>,
    /// Stop (with a `latest/` checkpoint) after this many epochs in this call.
    pub max_epochs: Option<usize>,
    /// Rows already recorded by a resumed run.
    pub history: Vec<EpochRow>,
    /// Leave the per-epoch validation columns as NaN; stage-end
    /// evaluation still runs.
    pub skip_epoch_validation: bool,
}

#[derive(Default)]
struct Means {
    n: usize,
    sums: [f64; 9],
}

impl Means {
    fn push(&mut self, lr: f64, r: &StepRecord) {
        let v = [
            lr,
            r.loss_pixel,
            r.loss_corr,
            r.loss_distill,
            r.loss_pg,
            r.grad_norm_student,
            r.grad_norm_amn,
            r.mask_ratio_observed,
            r.loss_student,
        ];
        for (s, x) in self.sums.iter_mut().zip(v) {
            *s += x;
        }
        self.n += 1;
    }

    fn get(&self, i: usize) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.sums[i] / self.n as f64
        }
    }
}

/// Runs one epoch of `stage` and returns its history row.
pub fn run_epoch<F: Real>(
    state: &mut TrainState<F>,
    cfg: &TrainConfig,
    stage: &StageConfig,
    train: &[super::LabeledClip],
    val: &[Prepared],
) -> Result<EpochRow> {
    let pc = &cfg.pretrain;
    let prepared = prepare_epoch(train, stage.regime, cfg, state.epoch, state.stage_epoch)?;
    let refs = all_windows(&prepared, cfg.student.tubelet.frames, pc.window_stride);
    let order = permutation(refs.len(), &mut RngStream::at(cfg.seed, streams::SHUFFLE, state.epoch as u64));
    // a trailing single-window batch carries no policy signal; drop it
    let batches: Vec<&[usize]> = order.chunks(pc.batch_size).filter(|c| c.len() >= 2).collect();
    if batches.is_empty() {
        return Err(Error::invalid(format!(
            "{} training windows cannot fill a batch of at least 2",
            refs.len()
        )));
    }
    let mut means = Means::default();
    for (s, chunk) in batches.iter().enumerate() {
        let at = state.stage_epoch as f64 + (s as f64 + 0.5) / batches.len() as f64;
        let lr = lr_at(at, pc.lr_student, pc.warmup_epochs, stage.epochs as f64);
        let picked: Vec<_> = chunk.iter().map(|&i| refs[i]).collect();
        let batch = assemble::<F>(&prepared, &picked, &cfg.student.tubelet)?;
        let rec = pretrain_step(state, cfg, &batch, lr, pc.lr_amn)?;
        means.push(lr, &rec);
    }
    let val = if val.is_empty() {
        Metrics {
            mae: f64::NAN,
            rmse: f64::NAN,
            r: f64::NAN,
        }
    } else {
        evaluate(&state.student, &state.store, val)?.metrics
    };
    let row = EpochRow {
        epoch: state.epoch,
        stage: stage.stage,
        lr_student: means.get(0),
        lr_amn: if pc.freeze_amn { 0.0 } else { pc.lr_amn },
        loss_pixel: means.get(1),
        loss_corr: means.get(2),
        loss_distill: means.get(3),
        loss_pg: means.get(4),
        grad_norm_student: means.get(5),
        grad_norm_amn: means.get(6),
        mask_ratio_observed: means.get(7),
        val,
    };
    state.epoch += 1;
    state.stage_epoch += 1;
    Ok(row)
}

/// Runs the remaining stages of `cfg` from the counters held in `state`.
/// Every stage ends with clean and occluded validation and, when an output
/// directory is given, a `stage<k>` checkpoint. A failure leaves the last
/// checkpoint in place.
pub fn run_curriculum<F: Real>(
    state: &mut TrainState<F>,
    cfg: &TrainConfig,
    data: &Datasets,
    opts: RunOptions<'_>,
) -> Result<CurriculumReport> {
    cfg.validate()?;
    let val_clean = clean_set(&data.val, cfg)?;
    let val_occluded = occluded_set(&data.val, cfg)?;
    let mut report = CurriculumReport {
        rows: opts.history.clone(),
        ..CurriculumReport::default()
    };
    if let Some(dir) = opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut ran = 0;
    while state.stage_index < cfg.stages.len() {
        let stage = cfg.stages[state.stage_index].clone();
        while state.stage_epoch < stage.epochs {
            if opts.max_epochs.is_some_and(|m| ran >= m) {
                if let Some(dir) = opts.out_dir {
                    save_checkpoint(&dir.join("latest"), state, cfg, Some(&report.csv()))?;
                }
                report.interrupted = true;
                return Ok(report);
            }
            let epoch_val: &[Prepared] = if opts.skip_epoch_validation { &[] } else { &val_clean };
            let row = run_epoch(state, cfg, &stage, &data.train, epoch_val)?;
            log::info!(
                "epoch {} (stage {}): loss pixel {:.4} corr {:.4} distill {:.4}, val MAE {:.2}",
                row.epoch,
                row.stage,
                row.loss_pixel,
                row.loss_corr,
                row.loss_distill,
                row.val.mae
            );
            report.rows.push(row);
            ran += 1;
            if let Some(dir) = opts.out_dir {
                write_atomic(&dir.join(HISTORY), report.csv().as_bytes())?;
                if opts.checkpoint_every.is_some_and(|k| k > 0 && state.epoch % k == 0) {
                    save_checkpoint(&dir.join("latest"), state, cfg, Some(&report.csv()))?;
                }
            }
        }
        let eval = StageEval {
            stage: stage.stage,
            clean: evaluate(&state.student, &state.store, &val_clean)?.metrics,
            occluded: evaluate(&state.student, &state.store, &val_occluded)?.metrics,
        };
        log::info!(
            "stage {} done: clean MAE {:.2}, occluded MAE {:.2}",
            stage.stage,
            eval.clean.mae,
            eval.occluded.mae
        );
        report.stage_evals.push(eval);
        state.stage_index += 1;
        state.stage_epoch = 0;
        if let Some(dir) = opts.out_dir {
            save_checkpoint(&dir.join(format!("stage{}", stage.stage)), state, cfg, Some(&report.csv()))?;
        }
    }
    Ok(report)
}
