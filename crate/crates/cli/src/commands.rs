//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pulsemae::gradsuite;
use pulsemae::signal::{metrics, pearson, sliding_hr, Metrics};
use pulsemae::synthdata::SceneSpec;
use pulsemae::teacher::{teacher_forward, TeacherConfig, TeacherKind};
use pulsemae::tensor::{ndt1, Tensor};
use pulsemae::trainer::checkpoint::read_history;
use pulsemae::trainer::data::{clean_set, generate_set};
use pulsemae::trainer::{
    finetune, load_checkpoint, predict_clip, run_curriculum, save_checkpoint, CurriculumReport, Datasets, LabeledClip,
    RunOptions, TrainConfig, TrainState,
};
use serde::Serialize;

use crate::config::{self, RunConfig};
use crate::dataset::{self, clip_id, StoredClip};
use crate::io::{require_dir, write_atomic};

/// A failure that maps to exit code 2.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn ids_and_clips(stored: Vec<StoredClip>) -> (Vec<String>, Vec<LabeledClip>) {
    stored.into_iter().map(|s| (s.id, s.clip)).unzip()
}

/// Clips of one split, from the dataset directory when configured.
fn split(cfg: &RunConfig, name: &str) -> Result<(Vec<String>, Vec<LabeledClip>)> {
    match &cfg.data.dir {
        Some(dir) => Ok(ids_and_clips(dataset::load_split(dir, Some(name))?)),
        None => {
            let seeds = match name {
                "train" => cfg.data.train,
                "val" => cfg.data.val,
                "finetune" => cfg.data.finetune,
                "test" => cfg.data.test,
                other => bail!("unknown split {other}"),
            };
            let clips = generate_set(seeds.range(), &cfg.data.spec)?;
            Ok((seeds.range().map(clip_id).collect(), clips))
        }
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Serialize)]
struct GenDataResolved<'a> {
    out: &'a Path,
    spec: &'a SceneSpec,
    seed_ranges: Vec<String>,
    checksum: &'a str,
}

pub fn gen_data(
    out: &Path,
    n_clips: Option<u64>,
    spec_path: Option<&Path>,
    seed_ranges: &[String],
    overrides: &[String],
) -> Result<()> {
    let mut table = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()))?;
            toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing spec {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        config::apply_override(&mut table, o)?;
    }
    let spec: SceneSpec = toml::Value::Table(table).try_into().context("invalid scene spec")?;
    let mut splits = seed_ranges
        .iter()
        .map(|s| dataset::parse_seed_range(s))
        .collect::<Result<Vec<_>>>()?;
    match (n_clips, splits.is_empty()) {
        (Some(n), true) => splits.push(("all".to_string(), 0..n)),
        (Some(n), false) => {
            let total: u64 = splits.iter().map(|(_, r)| r.end.saturating_sub(r.start)).sum();
            if total != n {
                bail!("--n-clips {n} disagrees with the seed ranges, which hold {total} clips");
            }
        }
        (None, true) => bail!("give --n-clips or at least one --seed-range"),
        (None, false) => {}
    }
    let manifest = dataset::generate(out, &spec, &splits)?;
    let resolved = GenDataResolved {
        out,
        spec: &spec,
        seed_ranges: splits.iter().map(|(n, r)| format!("{n}={}..{}", r.start, r.end)).collect(),
        checksum: &manifest.checksum,
    };
    config::write_resolved(out, &resolved)?;
    let n: usize = manifest.splits.iter().map(|s| s.clips.len()).sum();
    println!("wrote {n} clips to {} (checksum {})", out.display(), manifest.checksum);
    Ok(())
}

// ---------------------------------------------------------------- train

fn stage_evals_csv(report: &CurriculumReport) -> String {
    let mut s = String::from("stage,clean_mae,clean_rmse,clean_r,occluded_mae,occluded_rmse,occluded_r\n");
    for e in &report.stage_evals {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            e.stage, e.clean.mae, e.clean.rmse, e.clean.r, e.occluded.mae, e.occluded.rmse, e.occluded.r
        );
    }
    s
}

/// Keeps the stages numbered at most `last`.
fn truncate_stages(cfg: &mut TrainConfig, last: Option<usize>) -> Result<()> {
    if let Some(k) = last {
        if !(1..=3).contains(&k) {
            bail!("--stage {k} outside 1..=3");
        }
        cfg.stages.retain(|s| s.stage <= k);
        if cfg.stages.is_empty() {
            bail!("no configured stage is numbered {k} or lower");
        }
    }
    Ok(())
}

pub fn train(cfg: RunConfig, stage: Option<usize>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = cfg;
    let (mut state, history) = match resume {
        Some(dir) => {
            let (saved, state) = load_checkpoint::<f32>(dir)?;
            // the saved model config wins; the configured stage list may extend it
            let n = saved.stages.len();
            if cfg.train.stages.len() < n || cfg.train.stages[..n] != saved.stages[..] {
                bail!("configured stages do not extend the stages of checkpoint {}", dir.display());
            }
            let stages = cfg.train.stages.clone();
            cfg.train = TrainConfig { stages, ..saved };
            let history = match read_history(dir)? {
                Some(text) => CurriculumReport::parse_csv(&text)?,
                None => Vec::new(),
            };
            (Some(state), history)
        }
        None => (None, Vec::new()),
    };
    truncate_stages(&mut cfg.train, stage)?;
    cfg.validate()?;
    let out = cfg.output.dir.clone();
    config::write_resolved(&out, &cfg)?;
    let mut state = match state.take() {
        Some(s) => s,
        None => TrainState::<f32>::init(&cfg.train)?,
    };

    let (_, train) = split(&cfg, "train")?;
    let (_, val) = split(&cfg, "val")?;
    let data = Datasets { train, val };
    let opts = RunOptions {
        out_dir: Some(&out),
        checkpoint_every: (cfg.output.checkpoint_every > 0).then_some(cfg.output.checkpoint_every),
        max_epochs: None,
        history,
        skip_epoch_validation: false,
    };
    let report = run_curriculum(&mut state, &cfg.train, &data, opts)?;
    write_atomic(&out.join("stage_evals.csv"), stage_evals_csv(&report).as_bytes())?;
    for e in &report.stage_evals {
        println!(
            "stage {}: clean MAE {:.3} RMSE {:.3} R {:.3} | occluded MAE {:.3} RMSE {:.3} R {:.3}",
            e.stage, e.clean.mae, e.clean.rmse, e.clean.r, e.occluded.mae, e.occluded.rmse, e.occluded.r
        );
    }
    println!("{} epochs recorded in {}", report.rows.len(), out.join("history.csv").display());
    Ok(())
}

// ---------------------------------------------------------------- finetune

pub fn finetune_cmd(cfg: RunConfig, checkpoint: &Path) -> Result<()> {
    let (saved, mut state) = load_checkpoint::<f32>(checkpoint)?;
    let mut cfg = cfg;
    // model and pretraining settings come from the checkpoint
    cfg.train = TrainConfig {
        finetune: cfg.train.finetune.clone(),
        seed: cfg.train.seed,
        ..saved
    };
    cfg.validate()?;
    let out = cfg.output.dir.clone();
    config::write_resolved(&out, &cfg)?;

    let (_, ft) = split(&cfg, "finetune")?;
    let (_, val) = split(&cfg, "val")?;
    let (test_ids, test) = split(&cfg, "test")?;
    let ft = clean_set(&ft, &cfg.train)?;
    let val = clean_set(&val, &cfg.train)?;
    let test = clean_set(&test, &cfg.train)?;
    let report = finetune(&mut state, &cfg.train, &ft, &val)?;

    let mut csv = String::from("epoch,lr,loss,val_mae\n");
    for e in &report.history {
        let _ = writeln!(csv, "{},{},{},{}", e.epoch, e.lr, e.loss, e.val_mae);
    }
    write_atomic(&out.join("finetune.csv"), csv.as_bytes())?;
    save_checkpoint(&out.join("finetuned"), &state, &cfg.train, None)?;

    let preds = test
        .iter()
        .map(|p| predict_clip(&state.student, &state.store, &p.input))
        .collect::<pulsemae::Result<Vec<_>>>()?;
    let truths: Vec<Vec<f64>> = test.iter().map(|p| p.truth.clone()).collect();
    let fps: Vec<f64> = test.iter().map(|p| p.input.fps).collect();
    let table = score(&test_ids, &preds, &truths, &fps)?;
    write_atomic(&out.join("test_metrics.csv"), table.csv().as_bytes())?;
    println!(
        "best epoch {:?} (val MAE {:.3}), early stop {}",
        report.best_epoch, report.best_val_mae, report.stopped_early
    );
    print!("{}", table.csv());
    Ok(())
}

// ---------------------------------------------------------------- eval / baseline

pub struct ClipScore {
    pub id: String,
    pub pred_hr: f64,
    pub ref_hr: f64,
    pub r: f64,
}

pub struct ScoreTable {
    pub clips: Vec<ClipScore>,
    pub aggregate: Metrics,
}

impl ScoreTable {
    pub fn csv(&self) -> String {
        let mut s = String::from("clip,pred_hr,ref_hr,abs_err,r\n");
        for c in &self.clips {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6}",
                c.id,
                c.pred_hr,
                c.ref_hr,
                (c.pred_hr - c.ref_hr).abs(),
                c.r
            );
        }
        let a = &self.aggregate;
        let _ = writeln!(s, "# aggregate MAE {:.6} RMSE {:.6} R {:.6}", a.mae, a.rmse, a.r);
        s
    }
}

/// Sliding-window HR of prediction and reference per clip, plus aggregates.
pub fn score(ids: &[String], preds: &[Vec<f64>], truths: &[Vec<f64>], fps: &[f64]) -> Result<ScoreTable> {
    let mut clips = Vec::with_capacity(ids.len());
    for (((id, p), t), &fs) in ids.iter().zip(preds).zip(truths).zip(fps) {
        if p.len() != t.len() {
            bail!("clip {id}: prediction has {} samples, reference {}", p.len(), t.len());
        }
        clips.push(ClipScore {
            id: id.clone(),
            pred_hr: sliding_hr(p, fs)?.bpm,
            ref_hr: sliding_hr(t, fs)?.bpm,
            r: pearson(p, t, 1e-8),
        });
    }
    let ph: Vec<f64> = clips.iter().map(|c| c.pred_hr).collect();
    let rh: Vec<f64> = clips.iter().map(|c| c.ref_hr).collect();
    let aggregate = metrics(&ph, &rh, preds, truths)?;
    Ok(ScoreTable { clips, aggregate })
}

#[derive(Serialize)]
struct EvalResolved<'a> {
    data: &'a Path,
    split: Option<&'a str>,
    checkpoint: Option<&'a Path>,
    predictions: Option<&'a Path>,
    method: Option<&'a str>,
}

fn finish_table(out: &Path, name: &str, table: &ScoreTable) -> Result<()> {
    write_atomic(&out.join(name), table.csv().as_bytes())?;
    print!("{}", table.csv());
    Ok(())
}

pub fn eval(
    data: &Path,
    split_name: Option<&str>,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    out: &Path,
) -> Result<()> {
    config::write_resolved(
        out,
        &EvalResolved {
            data,
            split: split_name,
            checkpoint,
            predictions,
            method: None,
        },
    )?;
    let (ids, clips) = ids_and_clips(dataset::load_split(data, split_name)?);
    let truths: Vec<Vec<f64>> = clips.iter().map(|c| c.meta.bvp.clone()).collect();
    let fps: Vec<f64> = clips.iter().map(|c| c.clip.fps).collect();
    let preds = match (checkpoint, predictions) {
        (Some(ckpt), None) => {
            let (cfg, state) = load_checkpoint::<f32>(ckpt)?;
            let prepared = clean_set(&clips, &cfg)?;
            let pred_dir = out.join("predictions");
            let mut preds = Vec::with_capacity(prepared.len());
            for (id, p) in ids.iter().zip(&prepared) {
                let wave = predict_clip(&state.student, &state.store, &p.input)?;
                let t = Tensor::new(&[wave.len()], wave.clone())?;
                write_atomic(&pred_dir.join(format!("{id}.bvp.ndt1")), &ndt1::encode(&t))?;
                preds.push(wave);
            }
            preds
        }
        (None, Some(dir)) => {
            require_dir(dir, "predictions directory")?;
            ids.iter()
                .map(|id| {
                    let t = ndt1::load::<f64>(&dir.join(format!("{id}.bvp.ndt1")))?;
                    Ok(t.data().to_vec())
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => bail!("give exactly one of --checkpoint and --predictions"),
    };
    finish_table(out, "metrics.csv", &score(&ids, &preds, &truths, &fps)?)
}

pub fn baseline(method: TeacherKind, data: &Path, split_name: Option<&str>, out: &Path) -> Result<()> {
    if method == TeacherKind::Oracle {
        bail!("baseline method must be chrom or pos");
    }
    let name = if method == TeacherKind::Pos { "pos" } else { "chrom" };
    config::write_resolved(
        out,
        &EvalResolved {
            data,
            split: split_name,
            checkpoint: None,
            predictions: None,
            method: Some(name),
        },
    )?;
    let (ids, clips) = ids_and_clips(dataset::load_split(data, split_name)?);
    let tc = TeacherConfig {
        kind: method,
        ..TeacherConfig::default()
    };
    let preds = clips
        .iter()
        .map(|c| teacher_forward(&c.clip, Some(&c.meta), &tc).map(|w| w.samples))
        .collect::<pulsemae::Result<Vec<_>>>()?;
    let truths: Vec<Vec<f64>> = clips.iter().map(|c| c.meta.bvp.clone()).collect();
    let fps: Vec<f64> = clips.iter().map(|c| c.clip.fps).collect();
    finish_table(out, "metrics.csv", &score(&ids, &preds, &truths, &fps)?)
}

// ---------------------------------------------------------------- gradcheck

#[derive(Serialize)]
struct GradcheckResolved<'a> {
    seeds: u64,
    filter: Option<&'a str>,
    eps: f64,
    tolerance: f64,
    scan_tolerance: f64,
}

pub fn gradcheck(seeds: u64, filter: Option<&str>, out: &Path) -> Result<()> {
    config::write_resolved(
        out,
        &GradcheckResolved {
            seeds,
            filter,
            eps: gradsuite::EPS,
            tolerance: gradsuite::TOL,
            scan_tolerance: gradsuite::SCAN_TOL,
        },
    )?;
    let outcomes = gradsuite::run_suite(0..seeds, filter)?;
    if outcomes.is_empty() {
        bail!("no gradient case matches {filter:?}");
    }
    let mut csv = String::from("case,seed,max_rel_err,tolerance,coordinates,passed\n");
    for o in &outcomes {
        let _ = writeln!(
            csv,
            "{},{},{:e},{:e},{},{}",
            o.name,
            o.seed,
            o.max_rel_err,
            o.tolerance,
            o.coordinates,
            o.passed()
        );
    }
    write_atomic(&out.join("gradcheck.csv"), csv.as_bytes())?;
    let mut failed = Vec::new();
    let mut names: Vec<&str> = outcomes.iter().map(|o| o.name).collect();
    names.dedup();
    for name in names {
        let of: Vec<_> = outcomes.iter().filter(|o| o.name == name).collect();
        let worst = of.iter().map(|o| o.max_rel_err).fold(0.0, f64::max);
        let ok = of.iter().all(|o| o.passed());
        println!(
            "{:<24} worst rel. err {:.3e} (tol {:.0e}) {}",
            name,
            worst,
            of[0].tolerance,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        return Err(NumericFailure(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    println!("all {} checks passed", outcomes.len());
    Ok(())
}
