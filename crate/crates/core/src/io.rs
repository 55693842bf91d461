//! On-disk formats: a minimal binary tensor container, dataset directories
//! and model checkpoints.
//!
//! A tensor file is, in order:
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 8            | magic `MOLPDE01`                          |
//! | 4            | `ndim`, u32 little-endian, at least 1     |
//! | 8 × ndim     | dimensions, u64 little-endian             |
//! | 8 × Π dims   | payload, f64 little-endian, C order       |
//!
//! Nothing follows the payload. All writes go to a temporary file in the
//! target directory and are renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff_cnn::{Activation, ConvNet, Layer};
use crate::datagen::{DatasetSplits, GenerationConfig, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::neural_pde::{ModelSolver, NeuralPdeModel};
use crate::pde_library::PdeSystem;
use crate::tensor_grid::{GridField, Kernel, Shape};
use crate::train_eval::{Model, ModelKind, Standardizer, TrainedModel};

pub const MAGIC: &[u8; 8] = b"MOLPDE01";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.json";

/// Encodes a tensor into the container byte layout.
pub fn encode_tensor(dims: &[u64], data: &[f64]) -> Result<Vec<u8>> {
    if dims.is_empty() {
        return Err(Error::InvalidConfig("a tensor needs at least one dimension".into()));
    }
    let count = element_count(dims).ok_or_else(|| Error::InvalidConfig(format!("dimensions {dims:?} overflow")))?;
    if count != data.len() as u64 {
        return Err(Error::shape("encode_tensor", count, data.len()));
    }
    let mut out = Vec::with_capacity(12 + 8 * dims.len() + 8 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a container, reporting the byte offset of the first problem.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<u64>, Vec<f64>)> {
    let fail = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        let found = &bytes[..bytes.len().min(8)];
        return Err(fail(0, format!("bad magic {found:?}, expected \"MOLPDE01\"")));
    }
    if bytes.len() < 12 {
        return Err(fail(8, "file ends inside the ndim field".into()));
    }
    let ndim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if ndim == 0 {
        return Err(fail(8, "ndim is zero".into()));
    }
    let header = ndim
        .checked_mul(8)
        .and_then(|n| n.checked_add(12))
        .filter(|&n| n <= bytes.len())
        .ok_or_else(|| fail(12, format!("file ends inside the {ndim} dimension fields")))?;
    let dims: Vec<u64> = bytes[12..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let count = element_count(&dims)
        .and_then(|n| usize::try_from(n).ok())
        .and_then(|n| n.checked_mul(8).map(|b| (n, b)));
    let (count, payload) = count.ok_or_else(|| fail(12, format!("dimensions {dims:?} overflow")))?;
    let available = bytes.len() - header;
    if available < payload {
        return Err(fail(
            bytes.len(),
            format!("truncated payload: {available} of {payload} bytes present"),
        ));
    }
    if available > payload {
        return Err(fail(header + payload, format!("{} trailing bytes after the payload", available - payload)));
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect::<Vec<_>>();
    debug_assert_eq!(data.len(), count);
    Ok((dims, data))
}

fn element_count(dims: &[u64]) -> Option<u64> {
    dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
}

pub fn write_tensor(path: &Path, dims: &[u64], data: &[f64]) -> Result<()> {
    write_atomic(path, &encode_tensor(dims, data)?)
}

pub fn read_tensor(path: &Path) -> Result<(Vec<u64>, Vec<f64>)> {
    decode_tensor(&read_file(path)?)
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    // Check the version before the full schema so old files get a clear message.
    let raw: serde_json::Value = serde_json::from_slice(&bytes)?;
    let found = raw.get("format_version").and_then(|v| v.as_u64());
    match found {
        Some(v) if v == FORMAT_VERSION as u64 => Ok(serde_json::from_value(raw)?),
        Some(v) => Err(Error::Version { found: v.min(u32::MAX as u64) as u32, expected: FORMAT_VERSION }),
        None => Err(Error::Format { offset: 0, msg: format!("{} has no format_version", path.display()) }),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMeta {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitMeta {
    pub file: String,
    pub trajectories: usize,
    pub frames: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub system: PdeSystem,
    pub grid: GridMeta,
    pub dt: f64,
    pub channels: Vec<String>,
    /// Keyed by `train`, `val` and `test`. Each file holds a tensor of shape
    /// `(trajectories, frames, channels, ny, nx)`.
    pub splits: BTreeMap<String, SplitMeta>,
    #[serde(default)]
    pub generation: Option<GenerationConfig>,
}

/// Writes `dir/manifest.json` and one tensor per split.
pub fn save_dataset(dir: &Path, splits: &DatasetSplits, generation: Option<&GenerationConfig>) -> Result<DatasetManifest> {
    create_dir(dir)?;
    let first = &splits.train;
    let shape = splits
        .iter()
        .find_map(|s| s.frame_shape())
        .ok_or_else(|| Error::InvalidConfig("cannot save a dataset without frames".into()))?;
    let mut metas = BTreeMap::new();
    for split in splits.iter() {
        split.validate()?;
        if split.frame_shape().is_some_and(|s| s != shape) {
            return Err(Error::shape("save_dataset", shape, split.frame_shape().expect("checked")));
        }
        let file = format!("{}.bin", split.split);
        let mut data = Vec::with_capacity(split.len() * split.frames() * shape.len());
        for f in split.trajectories.iter().flatten() {
            data.extend_from_slice(f.data());
        }
        let dims = [split.len(), split.frames(), shape.channels, shape.height, shape.width].map(|d| d as u64);
        write_tensor(&dir.join(&file), &dims, &data)?;
        metas.insert(
            split.split.clone(),
            SplitMeta { file, trajectories: split.len(), frames: split.frames(), seeds: split.seeds.clone() },
        );
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        system: first.system.clone(),
        grid: GridMeta { nx: shape.width, ny: shape.height, dx: first.dx, dy: first.dy },
        dt: first.dt,
        channels: first.channel_labels.clone(),
        splits: metas,
        generation: generation.cloned(),
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    read_json(&dir.join(MANIFEST))
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, DatasetSplits)> {
    let manifest = load_manifest(dir)?;
    let load = |name: &str| -> Result<TrajectoryDataset> { load_split(dir, &manifest, name) };
    let splits = DatasetSplits { train: load("train")?, val: load("val")?, test: load("test")? };
    Ok((manifest, splits))
}

/// Loads one split named in the manifest.
pub fn load_split(dir: &Path, manifest: &DatasetManifest, name: &str) -> Result<TrajectoryDataset> {
    let meta = manifest
        .splits
        .get(name)
        .ok_or_else(|| Error::InvalidConfig(format!("manifest in {} has no `{name}` split", dir.display())))?;
    let path = dir.join(&meta.file);
    let (dims, data) = read_tensor(&path)?;
    let c = manifest.channels.len();
    let want = [meta.trajectories, meta.frames, c, manifest.grid.ny, manifest.grid.nx].map(|d| d as u64);
    if dims != want {
        return Err(Error::shape("load_dataset", format!("{want:?} in {}", path.display()), format!("{dims:?}")));
    }
    let shape = Shape::new(c, manifest.grid.ny, manifest.grid.nx);
    let trajectories = data
        .chunks_exact(meta.frames * shape.len().max(1))
        .map(|traj| {
            traj.chunks_exact(shape.len())
                .map(|f| GridField::new(shape, manifest.grid.dx, manifest.grid.dy, f.to_vec()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryDataset {
        system: manifest.system.clone(),
        split: name.to_string(),
        channel_labels: manifest.channels.clone(),
        dx: manifest.grid.dx,
        dy: manifest.grid.dy,
        dt: manifest.dt,
        seeds: meta.seeds.clone(),
        trajectories,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerMeta {
    pub activation: Activation,
    pub weights: String,
    pub bias: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: ModelKind,
    #[serde(default)]
    pub temporal_order: Option<usize>,
    #[serde(default)]
    pub observed_channels: Option<usize>,
    #[serde(default)]
    pub solver: Option<ModelSolver>,
    #[serde(default)]
    pub standardizer: Option<Standardizer>,
    /// Weight tensors have shape `(out, in, kh, kw)`, biases `(out)`.
    pub layers: Vec<LayerMeta>,
    /// Free-form training metadata.
    #[serde(default)]
    pub info: serde_json::Value,
}

/// Writes `dir/checkpoint.json` and two tensors per layer.
pub fn save_checkpoint(dir: &Path, model: &TrainedModel, info: serde_json::Value) -> Result<()> {
    create_dir(dir)?;
    let mut layers = Vec::new();
    if let Some(net) = model.net() {
        for (i, l) in net.layers().iter().enumerate() {
            let k = &l.kernel;
            let meta = LayerMeta {
                activation: l.activation,
                weights: format!("layer{i}_weights.bin"),
                bias: format!("layer{i}_bias.bin"),
            };
            let dims = [k.out_channels(), k.in_channels(), k.kh(), k.kw()].map(|d| d as u64);
            write_tensor(&dir.join(&meta.weights), &dims, k.weights())?;
            write_tensor(&dir.join(&meta.bias), &[k.out_channels() as u64], k.bias())?;
            layers.push(meta);
        }
    }
    let (temporal_order, observed_channels, solver) = match &model.model {
        Model::NeuralPde(m) => (Some(m.temporal_order), Some(m.observed_channels), Some(m.solver)),
        _ => (None, None, None),
    };
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        kind: model.kind(),
        temporal_order,
        observed_channels,
        solver,
        standardizer: model.standardizer.clone(),
        layers,
        info,
    };
    write_json(&dir.join(CHECKPOINT), &meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<(TrainedModel, CheckpointMeta)> {
    let meta: CheckpointMeta = read_json(&dir.join(CHECKPOINT))?;
    let layers = meta
        .layers
        .iter()
        .map(|l| {
            let (wd, w) = read_tensor(&dir.join(&l.weights))?;
            let (bd, b) = read_tensor(&dir.join(&l.bias))?;
            if wd.len() != 4 || bd != [wd[0]] {
                return Err(Error::shape("load_checkpoint", format!("4-d weights with matching bias in {}", l.weights), format!("{wd:?} and {bd:?}")));
            }
            let [o, i, kh, kw] = [wd[0], wd[1], wd[2], wd[3]].map(|d| d as usize);
            Ok(Layer { kernel: Kernel::new(o, i, kh, kw, w, b)?, activation: l.activation })
        })
        .collect::<Result<Vec<_>>>()?;
    let missing = |what: &str| Error::InvalidConfig(format!("checkpoint in {} lacks `{what}`", dir.display()));
    let model = match meta.kind {
        ModelKind::Persistence => Model::Persistence,
        ModelKind::Cnn => Model::Cnn(ConvNet::from_layers(layers)?),
        ModelKind::NeuralPde1 | ModelKind::NeuralPde2 => Model::NeuralPde(NeuralPdeModel::new(
            ConvNet::from_layers(layers)?,
            meta.temporal_order.ok_or_else(|| missing("temporal_order"))?,
            meta.observed_channels.ok_or_else(|| missing("observed_channels"))?,
            meta.solver.ok_or_else(|| missing("solver"))?,
        )?),
    };
    let model = TrainedModel { model, standardizer: meta.standardizer.clone() };
    if model.kind() != meta.kind {
        return Err(Error::InvalidConfig(format!("checkpoint kind {} does not match its temporal order", meta.kind)));
    }
    Ok((model, meta))
}

/// Paths written by [`save_dataset`] for each split, for callers that want to
/// report them.
pub fn split_paths(dir: &Path, manifest: &DatasetManifest) -> Vec<PathBuf> {
    manifest.splits.values().map(|s| dir.join(&s.file)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::build_dataset;
    use crate::PdeParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_fixture() {
        let bytes = encode_tensor(&[2, 3], &[0.0; 6]).unwrap();
        let header: [u8; 28] = [
            b'M', b'O', b'L', b'P', b'D', b'E', b'0', b'1', // magic
            2, 0, 0, 0, // ndim
            2, 0, 0, 0, 0, 0, 0, 0, // dim 0
            3, 0, 0, 0, 0, 0, 0, 0, // dim 1
        ];
        assert_eq!(&bytes[..28], &header);
        assert_eq!(bytes.len(), 28 + 48);
        let one = encode_tensor(&[1], &[1.0]).unwrap();
        // 1.0 = 0x3FF0000000000000
        assert_eq!(&one[20..], &[0, 0, 0, 0, 0, 0, 0xF0, 0x3F]);
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut data: Vec<f64> = (0..120).map(|_| rng.gen_range(-1e3..1e3)).collect();
        data[0] = -0.0;
        data[1] = f64::MIN_POSITIVE / 4.0;
        data[2] = -f64::MIN_POSITIVE / 1024.0;
        data[3] = f64::MAX;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_tensor(&path, &[2, 3, 4, 5], &data).unwrap();
        let (dims, back) = read_tensor(&path).unwrap();
        assert_eq!(dims, [2, 3, 4, 5]);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&data));
    }

    fn offset_of(e: Error) -> u64 {
        match e {
            Error::Format { offset, .. } => offset,
            other => panic!("expected a format error, got {other}"),
        }
    }

    #[test]
    fn malformed_files() {
        assert!(encode_tensor(&[], &[]).is_err());
        assert!(encode_tensor(&[2, 2], &[1.0; 3]).is_err());
        let good = encode_tensor(&[2, 3], &[1.5; 6]).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(offset_of(decode_tensor(&bad).unwrap_err()), 0);

        assert_eq!(offset_of(decode_tensor(&good[..good.len() - 3]).unwrap_err()), good.len() as u64 - 3);
        assert_eq!(offset_of(decode_tensor(&good[..20]).unwrap_err()), 12);
        assert_eq!(offset_of(decode_tensor(&good[..10]).unwrap_err()), 8);

        let mut trailing = good.clone();
        trailing.push(0);
        assert_eq!(offset_of(decode_tensor(&trailing).unwrap_err()), good.len() as u64);

        let mut zero = good.clone();
        zero[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(offset_of(decode_tensor(&zero).unwrap_err()), 8);

        let mut huge = encode_tensor(&[1, 1], &[0.0]).unwrap();
        huge[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        huge[20..28].copy_from_slice(&2u64.to_le_bytes());
        assert!(decode_tensor(&huge).unwrap_err().to_string().contains("overflow"));
    }

    fn tiny_splits() -> (GenerationConfig, DatasetSplits) {
        let sys = PdeSystem::new(PdeParams::AdvectionDiffusion { c_x: 1.0, c_y: 1.0, d: 0.001 }, 0.1).unwrap();
        let cfg = GenerationConfig { high_res: 20, t_end: 3.0, n_train: 2, n_val: 1, n_test: 1, ..GenerationConfig::small(sys, 5) };
        let splits = build_dataset(&cfg).unwrap();
        (cfg, splits)
    }

    #[test]
    fn dataset_roundtrip_and_errors() {
        let (cfg, splits) = tiny_splits();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(dir.path(), &splits, Some(&cfg)).unwrap();
        assert_eq!(manifest.splits["train"].trajectories, 2);
        assert_eq!(manifest.grid.nx, 10);
        let (m2, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(back, splits);

        let bytes = fs::read(dir.path().join("train.bin")).unwrap();
        let (cfg2, again) = tiny_splits();
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(dir2.path(), &again, Some(&cfg2)).unwrap();
        assert_eq!(fs::read(dir2.path().join("train.bin")).unwrap(), bytes);

        fs::remove_file(dir.path().join("val.bin")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(&err, Error::MissingFile(p) if p.ends_with("val.bin")), "{err}");

        let text = fs::read_to_string(dir2.path().join(MANIFEST)).unwrap();
        fs::write(dir2.path().join(MANIFEST), text.replace("\"format_version\": 1", "\"format_version\": 7")).unwrap();
        let err = load_dataset(dir2.path()).unwrap_err();
        assert!(matches!(err, Error::Version { found: 7, expected: 1 }));
        assert!(err.to_string().contains("regenerate"));
    }

    #[test]
    fn checkpoint_roundtrip_predicts_identically() {
        let dir = tempfile::tempdir().unwrap();
        let (_, splits) = tiny_splits();
        let u0 = &splits.test.trajectories[0][0];
        let models = [
            TrainedModel {
                model: Model::NeuralPde(NeuralPdeModel::init(2, 1, ModelSolver::rk4(0.5), 3).unwrap()),
                standardizer: Some(Standardizer { mean: vec![0.2], std: vec![1.7] }),
            },
            TrainedModel { model: Model::Cnn(ConvNet::init(1, 1, 4).unwrap()), standardizer: None },
            TrainedModel::persistence(),
        ];
        for (i, m) in models.iter().enumerate() {
            let d = dir.path().join(format!("ck{i}"));
            save_checkpoint(&d, m, serde_json::json!({"note": i})).unwrap();
            let (back, meta) = load_checkpoint(&d).unwrap();
            assert_eq!(&back, m);
            assert_eq!(meta.info["note"], i);
            assert_eq!(back.predict(u0, 3).unwrap(), m.predict(u0, 3).unwrap());
        }
        assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(Error::MissingFile(_))));
    }
}
