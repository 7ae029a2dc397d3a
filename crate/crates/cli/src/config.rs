//! Run configuration: one TOML file, `--set key.path=value` overrides, and
//! the resolved copy written next to every output.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pulsemae::synthdata::SceneSpec;
use pulsemae::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const RESOLVED: &str = "resolved_config.toml";

/// Half-open seed range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds(pub [u64; 2]);

impl Seeds {
    pub fn range(&self) -> Range<u64> {
        self.0[0]..self.0[1]
    }
}

/// Where clips come from. With `dir` set, splits are read from a dataset
/// written by `gen-data`; otherwise they are generated from `spec` and the
/// seed ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub spec: SceneSpec,
    pub train: Seeds,
    pub val: Seeds,
    pub finetune: Seeds,
    pub test: Seeds,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            spec: SceneSpec {
                hr_range: [60.0, 180.0],
                ..SceneSpec::default()
            },
            train: Seeds([0, 128]),
            val: Seeds([10_000, 10_016]),
            finetune: Seeds([20_000, 20_064]),
            test: Seeds([30_000, 30_032]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write `latest/` every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.spec.validate()?;
        self.train.validate()?;
        let splits = [
            ("train", self.data.train),
            ("val", self.data.val),
            ("finetune", self.data.finetune),
            ("test", self.data.test),
        ];
        check_disjoint(&splits.map(|(n, s)| (n.to_string(), s.range())))?;
        Ok(())
    }
}

/// Refuses empty, reversed or overlapping seed ranges.
pub fn check_disjoint(splits: &[(String, Range<u64>)]) -> Result<()> {
    for (name, r) in splits {
        if r.start >= r.end {
            bail!("seed range {name} = {}..{} is empty", r.start, r.end);
        }
    }
    for (i, (a, ra)) in splits.iter().enumerate() {
        for (b, rb) in &splits[i + 1..] {
            if ra.start < rb.end && rb.start < ra.end {
                bail!(
                    "seed ranges {a} = {}..{} and {b} = {}..{} overlap",
                    ra.start,
                    ra.end,
                    rb.start,
                    rb.end
                );
            }
        }
    }
    Ok(())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(text: &str) -> toml::Value {
    let doc = format!("v = {text}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(text.to_string())),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

/// Applies `a.b.c=value` to `root`, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, value) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not of the form key.path=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override {assignment:?} has an empty key");
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override {assignment:?}: {k} is not a table"),
        };
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

/// Reads `path` (or starts from defaults), applies overrides and validates.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .context("invalid configuration")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).context("serializing configuration")
}

/// Writes the resolved configuration into `dir`.
pub fn write_resolved<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    crate::io::write_atomic(&dir.join(RESOLVED), to_toml(value)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = to_toml(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = load(
            None,
            &[
                "train.pretrain.mask_ratio=0.5".into(),
                "train.teacher.kind=pos".into(),
                "data.train=[0, 4]".into(),
                "output.dir=out/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.pretrain.mask_ratio, 0.5);
        assert_eq!(cfg.train.teacher.kind, pulsemae::teacher::TeacherKind::Pos);
        assert_eq!(cfg.data.train, Seeds([0, 4]));
        assert_eq!(cfg.output.dir, PathBuf::from("out/x"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(load(None, &["train.pretrain.mask_ratoi=0.5".into()]).is_err());
        assert!(load(None, &["bogus=1".into()]).is_err());
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        assert!(load(None, &["data.test=[100, 140]".into()]).is_err());
    }
}
