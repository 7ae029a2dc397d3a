//! On-disk datasets: per-clip NDT1 tensors and metadata plus a manifest of
//! split membership and checksums.

use std::fs;
use std::ops::Range;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pulsemae::synthdata::{gen_clip, ClipMeta, SceneSpec};
use pulsemae::tensor::{ndt1, Tensor};
use pulsemae::trainer::LabeledClip;
use pulsemae::video::VideoClip;
use serde::{Deserialize, Serialize};

use crate::config::check_disjoint;
use crate::io::{require_dir, sha256_hex, write_atomic};

pub const MANIFEST: &str = "dataset.toml";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub name: String,
    pub seeds: [u64; 2],
    pub clips: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: u32,
    /// Digest over every `name sha256` line, in file order.
    pub checksum: String,
    pub spec: SceneSpec,
    pub splits: Vec<Split>,
    pub files: Vec<FileEntry>,
}

pub fn clip_id(seed: u64) -> String {
    format!("clip-{seed:08}")
}

/// Parses `name=A..B` (or a bare `A..B`, named `all`).
pub fn parse_seed_range(text: &str) -> Result<(String, Range<u64>)> {
    let (name, range) = match text.split_once('=') {
        Some((n, r)) => (n.trim().to_string(), r.trim()),
        None => ("all".to_string(), text.trim()),
    };
    let (a, b) = range
        .split_once("..")
        .with_context(|| format!("seed range {text:?} is not of the form [name=]A..B"))?;
    let a: u64 = a.trim().parse().with_context(|| format!("bad seed range start in {text:?}"))?;
    let b: u64 = b.trim().parse().with_context(|| format!("bad seed range end in {text:?}"))?;
    if name.is_empty() {
        bail!("seed range {text:?} has an empty split name");
    }
    Ok((name, a..b))
}

fn checksum(files: &[FileEntry]) -> String {
    let text: String = files.iter().map(|f| format!("{} {}\n", f.name, f.sha256)).collect();
    sha256_hex(text.as_bytes())
}

/// Generates every split into `out` and writes the manifest last.
pub fn generate(out: &Path, spec: &SceneSpec, splits: &[(String, Range<u64>)]) -> Result<DatasetManifest> {
    spec.validate()?;
    if splits.is_empty() {
        bail!("no seed ranges given");
    }
    check_disjoint(splits)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut files = Vec::new();
    let mut manifest_splits = Vec::new();
    for (name, range) in splits {
        let mut clips = Vec::new();
        for seed in range.clone() {
            let (clip, meta) = gen_clip(seed, spec)?;
            let id = clip_id(seed);
            let bvp = Tensor::new(&[meta.bvp.len()], meta.bvp.clone())?;
            let parts = [
                (format!("{id}.clip.ndt1"), ndt1::encode(&clip.pixels)),
                (format!("{id}.bvp.ndt1"), ndt1::encode(&bvp)),
                (format!("{id}.meta"), toml::to_string(&meta).context("serializing clip metadata")?.into_bytes()),
            ];
            for (file, bytes) in parts {
                write_atomic(&out.join(&file), &bytes)?;
                files.push(FileEntry {
                    name: file,
                    sha256: sha256_hex(&bytes),
                });
            }
            clips.push(id);
        }
        log::info!("split {name}: {} clips", clips.len());
        manifest_splits.push(Split {
            name: name.clone(),
            seeds: [range.start, range.end],
            clips,
        });
    }
    let manifest = DatasetManifest {
        format: FORMAT,
        checksum: checksum(&files),
        spec: spec.clone(),
        splits: manifest_splits,
        files,
    };
    let text = toml::to_string(&manifest).context("serializing dataset manifest")?;
    write_atomic(&out.join(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    require_dir(dir, "data directory")?;
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading dataset manifest {}", path.display()))?;
    let m: DatasetManifest = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if m.format != FORMAT {
        bail!("{}: unsupported dataset format {}", path.display(), m.format);
    }
    if checksum(&m.files) != m.checksum {
        bail!("{}: manifest checksum does not match its file list", path.display());
    }
    Ok(m)
}

/// A clip read back from disk, keyed by its id.
pub struct StoredClip {
    pub id: String,
    pub clip: LabeledClip,
}

fn read_verified(dir: &Path, name: &str, m: &DatasetManifest) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(entry) = m.files.iter().find(|f| f.name == name) {
        if entry.sha256 != sha256_hex(&bytes) {
            bail!("{}: checksum mismatch", path.display());
        }
    }
    Ok(bytes)
}

pub fn load_clip(dir: &Path, id: &str, m: &DatasetManifest) -> Result<StoredClip> {
    let meta_name = format!("{id}.meta");
    let meta_text = String::from_utf8(read_verified(dir, &meta_name, m)?)
        .with_context(|| format!("{meta_name} is not UTF-8"))?;
    let meta: ClipMeta = toml::from_str(&meta_text).with_context(|| format!("parsing {meta_name}"))?;
    let clip_name = format!("{id}.clip.ndt1");
    let pixels = ndt1::decode::<f32>(&read_verified(dir, &clip_name, m)?, &dir.join(&clip_name))?;
    let clip = VideoClip::new(pixels, meta.fps)?;
    Ok(StoredClip {
        id: id.to_string(),
        clip: LabeledClip::new(clip, meta)?,
    })
}

/// Loads the named split, or every split when `name` is `None`.
pub fn load_split(dir: &Path, name: Option<&str>) -> Result<Vec<StoredClip>> {
    let m = read_manifest(dir)?;
    let splits: Vec<&Split> = match name {
        Some(n) => {
            let s = m.splits.iter().find(|s| s.name == n).with_context(|| {
                let known: Vec<&str> = m.splits.iter().map(|s| s.name.as_str()).collect();
                format!("{}: no split named {n:?} (have {known:?})", dir.display())
            })?;
            vec![s]
        }
        None => m.splits.iter().collect(),
    };
    splits
        .iter()
        .flat_map(|s| s.clips.iter())
        .map(|id| load_clip(dir, id, &m))
        .collect()
}
