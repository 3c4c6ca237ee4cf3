//! On-disk layout of a run directory and the dataset manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pjdm_core::rng::stable_hash64;
use pjdm_core::sino_io::{decode_sinogram, encode_sinogram};
use pjdm_core::{Geometry, PhantomSpec, Sinogram};

pub const DATA_FORMAT: u32 = 1;

/// Paths inside a run directory, all relative to `root`.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub const DATA_DIR: &'static str = "data";
    pub const DATA_MANIFEST: &'static str = "data/manifest.json";
    pub const BRIDGE_CKPT: &'static str = "models/bridge.ckpt";
    pub const BRIDGE_OPT: &'static str = "models/bridge.ckpt.opt";
    pub const BRIDGE_LOSS: &'static str = "models/bridge_loss.csv";
    pub const REFINER_CKPT: &'static str = "models/refiner.ckpt";
    pub const REFINER_OPT: &'static str = "models/refiner.ckpt.opt";
    pub const REFINER_LOSS: &'static str = "models/refiner_loss.csv";
    pub const CONVERT_DIR: &'static str = "convert";
    pub const EVAL_DIR: &'static str = "eval";
    pub const ABLATE_DIR: &'static str = "ablate";
    pub const RUN_MANIFEST: &'static str = "run_manifest.json";
}

/// Writes through a temporary sibling and a rename, so a crash never
/// leaves a half-written file under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn hash_hex(bytes: &[u8]) -> String {
    format!("{:016x}", stable_hash64(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredSino {
    /// Relative to the run directory.
    pub path: String,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataEntry {
    pub spec: PhantomSpec,
    pub a: Option<StoredSino>,
    pub b: StoredSino,
}

/// Describes the generated dataset. Sinograms on disk are already divided
/// by `global_scale`, the maximum over the training lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub format: u32,
    pub geometry: Geometry,
    pub seed: u64,
    pub global_scale: f64,
    pub n_paired: usize,
    pub n_unpaired: usize,
    pub n_test: usize,
    pub paired: Vec<DataEntry>,
    pub unpaired: Vec<DataEntry>,
    pub test: Vec<DataEntry>,
}

impl DataManifest {
    pub fn files(&self) -> impl Iterator<Item = &StoredSino> {
        self.paired
            .iter()
            .chain(&self.unpaired)
            .chain(&self.test)
            .flat_map(|e| e.a.iter().chain(std::iter::once(&e.b)))
    }
}

pub fn store_sino(layout: &Layout, rel: String, sino: &Sinogram) -> Result<StoredSino> {
    let bytes = encode_sinogram(sino);
    write_atomic(&layout.path(&rel), &bytes)?;
    Ok(StoredSino {
        hash: hash_hex(&bytes),
        path: rel,
    })
}

pub fn load_sino(layout: &Layout, stored: &StoredSino) -> Result<Sinogram> {
    let path = layout.path(&stored.path);
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    if hash_hex(&bytes) != stored.hash {
        bail!(
            "{} does not match the dataset manifest; re-run gen-data",
            path.display()
        );
    }
    Ok(decode_sinogram(&bytes)?)
}

pub fn read_sino_file(path: &Path) -> Result<Sinogram> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_sinogram(&bytes).with_context(|| format!("decoding {}", path.display()))
}

pub fn write_sino_file(path: &Path, sino: &Sinogram) -> Result<()> {
    write_atomic(path, &encode_sinogram(sino))
}

pub fn load_manifest(layout: &Layout) -> Result<DataManifest> {
    let path = layout.path(Layout::DATA_MANIFEST);
    let text = fs::read_to_string(&path)
        .with_context(|| format!("no dataset at {}; run gen-data first", path.display()))?;
    let manifest: DataManifest = serde_json::from_str(&text).with_context(|| {
        format!(
            "dataset manifest {} is unreadable; re-run gen-data",
            path.display()
        )
    })?;
    if manifest.format != DATA_FORMAT {
        bail!(
            "dataset manifest format {} is not supported",
            manifest.format
        );
    }
    Ok(manifest)
}

/// Loaded dataset with sinograms in manifest order.
pub struct LoadedData {
    pub manifest: DataManifest,
    pub paired: Vec<(Sinogram, Sinogram)>,
    pub unpaired_b: Vec<Sinogram>,
    pub test: Vec<(Sinogram, Sinogram)>,
}

fn load_pairs(layout: &Layout, entries: &[DataEntry]) -> Result<Vec<(Sinogram, Sinogram)>> {
    entries
        .iter()
        .map(|e| {
            let a =
                e.a.as_ref()
                    .context("paired entry without a tracer-A sinogram")?;
            Ok((load_sino(layout, a)?, load_sino(layout, &e.b)?))
        })
        .collect()
}

pub fn load_data(layout: &Layout, geometry: Geometry) -> Result<LoadedData> {
    let manifest = load_manifest(layout)?;
    if manifest.geometry != geometry {
        bail!(
            "dataset geometry {:?} does not match the config {:?}",
            manifest.geometry,
            geometry
        );
    }
    let paired = load_pairs(layout, &manifest.paired)?;
    let test = load_pairs(layout, &manifest.test)?;
    let unpaired_b = manifest
        .unpaired
        .iter()
        .map(|e| load_sino(layout, &e.b))
        .collect::<Result<_>>()?;
    Ok(LoadedData {
        manifest,
        paired,
        unpaired_b,
        test,
    })
}
