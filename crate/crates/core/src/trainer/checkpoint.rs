//! Checkpoint directories: one NDT1 file per parameter and optimizer moment,
//! a TOML manifest and the resolved run config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::params::{ParamRole, ParamStore};
use crate::tensor::{ndt1, Real};

pub const MANIFEST: &str = "manifest.toml";
pub const CONFIG: &str = "config.toml";
pub const HISTORY: &str = "history.csv";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestParam {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub role: String,
    pub decay_exempt: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestOptimizer {
    pub name: String,
    pub step: u64,
    /// Parameter names in update order; moments live in `opt/<name>/`.
    pub params: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub dtype: String,
    pub epoch: usize,
    pub stage_index: usize,
    pub stage_epoch: usize,
    pub step: u64,
    pub params: Vec<ManifestParam>,
    pub optimizers: Vec<ManifestOptimizer>,
}

fn dtype<F: Real>() -> &'static str {
    if std::mem::size_of::<F>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_optimizer<F: Real>(dir: &Path, name: &str, opt: &AdamW<F>, store: &ParamStore<F>) -> Result<ManifestOptimizer> {
    let sub = dir.join("opt").join(name);
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let mut params = Vec::with_capacity(opt.ids.len());
    for (i, &id) in opt.ids.iter().enumerate() {
        let pname = &store.entry(id).name;
        ndt1::save(&sub.join(format!("{pname}.m.ndt1")), &opt.m[i])?;
        ndt1::save(&sub.join(format!("{pname}.v.ndt1")), &opt.v[i])?;
        params.push(pname.clone());
    }
    Ok(ManifestOptimizer {
        name: name.to_string(),
        step: opt.step,
        params,
    })
}

/// Saves `state` under `dir`, replacing any previous checkpoint there only
/// once the new one is complete.
pub fn save_checkpoint<F: Real>(dir: &Path, state: &TrainState<F>, cfg: &TrainConfig, history: Option<&str>) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::invalid(format!("checkpoint path {} has no final component", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = dir.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let pdir = tmp.join("params");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;

    let mut params = Vec::with_capacity(state.store.len());
    for e in state.store.entries() {
        let file = format!("params/{}.ndt1", e.name);
        ndt1::save(&tmp.join(&file), &e.value)?;
        params.push(ManifestParam {
            name: e.name.clone(),
            file,
            shape: e.value.shape().to_vec(),
            role: e.role.as_str().to_string(),
            decay_exempt: e.role.decay_exempt(),
        });
    }
    let optimizers = vec![
        write_optimizer(&tmp, "student", &state.opt_student, &state.store)?,
        write_optimizer(&tmp, "amn", &state.opt_amn, &state.store)?,
    ];
    let manifest = Manifest {
        format: FORMAT,
        dtype: dtype::<F>().to_string(),
        epoch: state.epoch,
        stage_index: state.stage_index,
        stage_epoch: state.stage_epoch,
        step: state.step,
        params,
        optimizers,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::format(tmp.join(MANIFEST), e.to_string()))?;
    fs::write(tmp.join(MANIFEST), text).map_err(|e| Error::io(tmp.join(MANIFEST), e))?;
    let text = toml::to_string(cfg).map_err(|e| Error::format(tmp.join(CONFIG), e.to_string()))?;
    fs::write(tmp.join(CONFIG), text).map_err(|e| Error::io(tmp.join(CONFIG), e))?;
    if let Some(h) = history {
        fs::write(tmp.join(HISTORY), h).map_err(|e| Error::io(tmp.join(HISTORY), e))?;
    }

    if dir.exists() {
        let old = parent.join(format!(".{name}.old-{}", std::process::id()));
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn load_optimizer<F: Real>(dir: &Path, m: &ManifestOptimizer, opt: &mut AdamW<F>, store: &ParamStore<F>) -> Result<()> {
    let names: Vec<&String> = opt.ids.iter().map(|&id| &store.entry(id).name).collect();
    if names.len() != m.params.len() || names.iter().zip(&m.params).any(|(a, b)| *a != b) {
        return Err(Error::format(dir.join(MANIFEST), format!("optimizer {} parameter list mismatch", m.name)));
    }
    let sub = dir.join("opt").join(&m.name);
    for (i, name) in m.params.iter().enumerate() {
        let mt = ndt1::load::<F>(&sub.join(format!("{name}.m.ndt1")))?;
        let vt = ndt1::load::<F>(&sub.join(format!("{name}.v.ndt1")))?;
        if mt.shape() != opt.m[i].shape() || vt.shape() != opt.v[i].shape() {
            return Err(Error::format(&sub, format!("moment shape mismatch for {name}")));
        }
        opt.m[i] = mt;
        opt.v[i] = vt;
    }
    opt.step = m.step;
    Ok(())
}

/// Reads the manifest of a checkpoint.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = read_toml(&dir.join(MANIFEST))?;
    if m.format != FORMAT {
        return Err(Error::format(dir.join(MANIFEST), format!("unsupported format {}", m.format)));
    }
    Ok(m)
}

/// Loads the config and full training state saved under `dir`.
pub fn load_checkpoint<F: Real>(dir: &Path) -> Result<(TrainConfig, TrainState<F>)> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint directory not found")));
    }
    let manifest = read_manifest(dir)?;
    let cfg: TrainConfig = read_toml(&dir.join(CONFIG))?;
    let mut state = TrainState::<F>::init(&cfg)?;
    if manifest.params.len() != state.store.len() {
        return Err(Error::format(
            dir.join(MANIFEST),
            format!("{} parameters listed, model has {}", manifest.params.len(), state.store.len()),
        ));
    }
    for mp in &manifest.params {
        let id = state
            .store
            .find(&mp.name)
            .ok_or_else(|| Error::format(dir.join(MANIFEST), format!("unknown parameter {}", mp.name)))?;
        let role = ParamRole::parse(&mp.role)
            .ok_or_else(|| Error::format(dir.join(MANIFEST), format!("unknown role {}", mp.role)))?;
        if role != state.store.entry(id).role || mp.decay_exempt != role.decay_exempt() {
            return Err(Error::format(dir.join(MANIFEST), format!("role mismatch for {}", mp.name)));
        }
        let t = ndt1::load::<F>(&dir.join(&mp.file))?;
        if t.shape() != mp.shape.as_slice() || t.shape() != state.store.get(id).shape() {
            return Err(Error::format(dir.join(&mp.file), format!("shape mismatch for {}", mp.name)));
        }
        *state.store.get_mut(id) = t;
    }
    for m in &manifest.optimizers {
        match m.name.as_str() {
            "student" => load_optimizer(dir, m, &mut state.opt_student, &state.store)?,
            "amn" => load_optimizer(dir, m, &mut state.opt_amn, &state.store)?,
            other => return Err(Error::format(dir.join(MANIFEST), format!("unknown optimizer {other}"))),
        }
    }
    state.epoch = manifest.epoch;
    state.stage_index = manifest.stage_index;
    state.stage_epoch = manifest.stage_epoch;
    state.step = manifest.step;
    Ok((cfg, state))
}

/// The training history stored with a checkpoint, if any.
pub fn read_history(dir: &Path) -> Result<Option<String>> {
    let path = dir.join(HISTORY);
    if !path.exists() {
        return Ok(None);
    }
    fs::read_to_string(&path).map(Some).map_err(|e| Error::io(path, e))
}
