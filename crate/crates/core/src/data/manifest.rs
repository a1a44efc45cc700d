//! Dataset manifest: seeded train/test split over complete sample triples.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{read_sample, SamplePaths, DEPTH_SCALE};
use crate::error::{config_err, Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// File paths are relative to the manifest root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub split: Split,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub ob: PathBuf,
}

/// A sample id that could not be used, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestError {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    #[serde(skip)]
    pub root: PathBuf,
    pub depth_scale: f64,
    pub split_fraction: f64,
    pub seed: u64,
    pub generator: serde_json::Value,
    pub entries: Vec<ManifestEntry>,
    pub errors: Vec<ManifestError>,
}

const SUFFIXES: [&str; 3] = [".rgb.png", ".depth.png", ".ob.png"];

#[derive(Default)]
struct Found {
    dir: Option<PathBuf>,
    present: [bool; 3],
}

fn scan(dir: &Path, found: &mut BTreeMap<String, Found>) -> Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    let read = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in read {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        for (k, suffix) in SUFFIXES.iter().enumerate() {
            if let Some(id) = name.strip_suffix(suffix) {
                let f = found.entry(id.to_string()).or_default();
                // first directory wins if an id shows up twice
                if f.dir.get_or_insert_with(|| dir.to_path_buf()) == dir {
                    f.present[k] = true;
                }
            }
        }
    }
    Ok(())
}

/// Scans `root`, `root/train` and `root/test` for `{id}.{rgb,depth,ob}.png`
/// triples, splits the complete ones with a seeded shuffle and moves their
/// files into `root/train` or `root/test`. Incomplete triples are reported
/// in `errors` and left where they are.
pub fn build_manifest(
    root: &Path,
    split_fraction: f64,
    seed: u64,
    generator: serde_json::Value,
) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&split_fraction) {
        return Err(config_err!("split fraction must lie in [0, 1], got {split_fraction}"));
    }
    let mut found = BTreeMap::new();
    scan(root, &mut found)?;
    scan(&root.join("train"), &mut found)?;
    scan(&root.join("test"), &mut found)?;

    let mut complete = Vec::new();
    let mut errors = Vec::new();
    for (id, f) in &found {
        if f.present.iter().all(|&p| p) {
            complete.push((id.clone(), f.dir.clone().expect("dir set with files")));
        } else {
            let missing: Vec<&str> = SUFFIXES
                .iter()
                .zip(f.present.iter())
                .filter(|(_, &p)| !p)
                .map(|(s, _)| s.trim_start_matches('.'))
                .collect();
            errors.push(ManifestError {
                sample_id: id.clone(),
                reason: format!("missing {}", missing.join(", ")),
            });
        }
    }
    if complete.is_empty() {
        return Err(Error::io(root, "no complete sample triple found"));
    }
    let mut order: Vec<usize> = (0..complete.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (complete.len() as f64 * split_fraction).round() as usize;

    let mut entries = Vec::with_capacity(complete.len());
    for (rank, &i) in order.iter().enumerate() {
        let (id, dir) = &complete[i];
        let split = if rank < n_train { Split::Train } else { Split::Test };
        let target = root.join(split.dir_name());
        std::fs::create_dir_all(&target).map_err(|e| Error::io(&target, e))?;
        let from = SamplePaths::in_dir(dir, id);
        let to = SamplePaths::in_dir(&target, id);
        for (a, b) in from.all().into_iter().zip(to.all()) {
            if a != b {
                std::fs::rename(a, b).map_err(|e| Error::io(a, e))?;
            }
        }
        let rel = SamplePaths::in_dir(Path::new(split.dir_name()), id);
        entries.push(ManifestEntry {
            sample_id: id.clone(),
            split,
            rgb: rel.rgb,
            depth: rel.depth,
            ob: rel.ob,
        });
    }
    entries.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(DatasetManifest {
        format_version: MANIFEST_VERSION,
        root: root.to_path_buf(),
        depth_scale: DEPTH_SCALE,
        split_fraction,
        seed,
        generator,
        entries,
        errors,
    })
}

impl DatasetManifest {
    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Loads `dir/manifest.json` (or a manifest file path directly) and checks
    /// that every listed file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::io(&file, e))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::io(&file, format!("unsupported manifest version {}", m.format_version)));
        }
        m.root = file.parent().unwrap_or(Path::new(".")).to_path_buf();
        for e in &m.entries {
            for p in m.paths(e).all() {
                if !p.is_file() {
                    return Err(Error::io(p, "listed file is missing"));
                }
            }
        }
        Ok(m)
    }

    pub fn paths(&self, entry: &ManifestEntry) -> SamplePaths {
        SamplePaths {
            rgb: self.root.join(&entry.rgb),
            depth: self.root.join(&entry.depth),
            ob: self.root.join(&entry.ob),
        }
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Parses every listed sample.
    pub fn verify(&self) -> Result<()> {
        for e in &self.entries {
            read_sample(&self.paths(e))?.validate()?;
        }
        Ok(())
    }
}
