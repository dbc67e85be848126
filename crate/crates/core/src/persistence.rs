//! On-disk formats: tensor files, checkpoints and exported motions.
//!
//! Tensor file layout, all little-endian:
//!
//! ```text
//! "MCLR" | version u32 = 1 | rank u32 | dims u32 × rank | f32 × ∏dims (row-major)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{self, MotionSequence, NormStats, Skeleton, FEATURE_DIM, JOINTS, REST_ROOT_HEIGHT};
use crate::model::{Denoiser, ModelConfig, MotionModel};
use crate::network::{LayerInfo, Params};
use crate::text::{hex, Vocabulary};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MCLR";
pub const TENSOR_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT: &str = "mclr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_tensor(t: &ArrayViewD<'_, f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    // Logical (row-major) order regardless of memory layout.
    for &v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::data("tensor file truncated"))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<ArrayD<f32>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::data("not a tensor file (bad magic)"));
    }
    let version = read_u32(bytes, 4)?;
    if version != TENSOR_VERSION {
        return Err(Error::data(format!("unsupported tensor file version {version}")));
    }
    let rank = read_u32(bytes, 8)? as usize;
    if rank > 8 {
        return Err(Error::data(format!("implausible tensor rank {rank}")));
    }
    let dims = (0..rank)
        .map(|i| read_u32(bytes, 12 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = dims.iter().product();
    let start = 12 + 4 * rank;
    if bytes.len() != start + 4 * count {
        return Err(Error::data(format!(
            "tensor payload is {} bytes, expected {}",
            bytes.len() - start.min(bytes.len()),
            4 * count
        )));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::data(e.to_string()))
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_tensor(path: &Path, t: &ArrayViewD<'_, f32>) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn read_tensor(path: &Path) -> Result<ArrayD<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    decode_tensor(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    /// SHA-256 of the blob, so the manifest hash identifies the weights too.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocabulary: Vec<String>,
    pub vocab_hash: String,
    pub norm_stats: NormStats,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub attention_layers: Vec<LayerInfo>,
    pub parameters: Vec<ParamEntry>,
    /// Extra tensor groups (optimizer moments) keyed by group name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extras: BTreeMap<String, Vec<ParamEntry>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn param_file(group: &str, name: &str) -> String {
    format!("{group}/{name}.mclr")
}

fn write_group(dir: &Path, group: &str, params: &Denoiser<f32>) -> Result<Vec<ParamEntry>> {
    let mut entries = Vec::new();
    let mut failure = None;
    params.visit("", &mut |name, a| {
        if failure.is_some() {
            return;
        }
        let file = param_file(group, name);
        let bytes = encode_tensor(&a);
        match write_atomic(&dir.join(&file), &bytes) {
            Ok(()) => entries.push(ParamEntry {
                name: name.to_string(),
                shape: a.shape().to_vec(),
                file,
                sha256: hex(&Sha256::digest(&bytes)),
            }),
            Err(e) => failure = Some(e),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(entries),
    }
}

fn read_group(dir: &Path, entries: &[ParamEntry], into: &mut Denoiser<f32>) -> Result<()> {
    let by_name: BTreeMap<_, _> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut failure = None;
    into.visit_mut("", &mut |name, mut a| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = by_name.get(name) else {
            failure = Some(Error::data(format!("checkpoint lacks parameter {name}")));
            return;
        };
        if entry.shape != a.shape() {
            failure = Some(Error::data(format!(
                "parameter {name} has shape {:?} on disk, model expects {:?}",
                entry.shape,
                a.shape()
            )));
            return;
        }
        let path = dir.join(&entry.file);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                failure = Some(Error::data(format!("{}: {e}", path.display())));
                return;
            }
        };
        if hex(&Sha256::digest(&bytes)) != entry.sha256 {
            failure = Some(Error::data(format!("blob for {name} does not match its recorded hash")));
            return;
        }
        match decode_tensor(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display()))) {
            Ok(t) if t.shape() == a.shape() => a.assign(&t),
            Ok(_) => failure = Some(Error::data(format!("blob for {name} does not match the shape table"))),
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if by_name.len() != into.names().len() {
        return Err(Error::data("checkpoint lists parameters the model does not have"));
    }
    Ok(())
}

/// Optional optimizer moments saved next to the weights.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub first_moment: Denoiser<f32>,
    pub second_moment: Denoiser<f32>,
}

/// Writes `manifest.json` plus one tensor file per parameter under `dir`.
pub fn save_checkpoint(dir: &Path, model: &MotionModel, step: u64, optim: Option<&OptimizerState>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let parameters = write_group(dir, "params", &model.denoiser)?;
    let mut extras = BTreeMap::new();
    if let Some(o) = optim {
        extras.insert("adam_m".to_string(), write_group(dir, "adam_m", &o.first_moment)?);
        extras.insert("adam_v".to_string(), write_group(dir, "adam_v", &o.second_moment)?);
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: model.config,
        vocabulary: model.vocab.words().to_vec(),
        vocab_hash: model.vocab.hash(),
        norm_stats: model.stats.clone(),
        step,
        attention_layers: model.config.unet.layer_table(),
        parameters,
        extras,
    };
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(Error::data("unsupported checkpoint format"));
    }
    Ok(manifest)
}

/// Loaded checkpoint plus its bookkeeping.
pub struct LoadedCheckpoint {
    pub model: MotionModel,
    pub step: u64,
    pub optimizer: Option<OptimizerState>,
    pub manifest_hash: String,
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    load_checkpoint_checked(dir, None)
}

/// Loads a checkpoint, optionally requiring a specific vocabulary.
pub fn load_checkpoint_checked(dir: &Path, expected_vocab: Option<&Vocabulary>) -> Result<LoadedCheckpoint> {
    let manifest = read_manifest(dir)?;
    let vocab = Vocabulary::new(manifest.vocabulary.clone())?;
    if vocab.hash() != manifest.vocab_hash {
        return Err(Error::data("vocabulary hash does not match the stored vocabulary"));
    }
    if let Some(v) = expected_vocab {
        if v.hash() != manifest.vocab_hash {
            return Err(Error::data("checkpoint was trained with a different vocabulary"));
        }
    }
    if manifest.attention_layers != manifest.config.unet.layer_table() {
        return Err(Error::data("attention layer table does not match the architecture"));
    }
    let mut model = MotionModel::new(manifest.config, vocab, manifest.norm_stats.clone(), 0)?;
    read_group(dir, &manifest.parameters, &mut model.denoiser)?;
    let optimizer = match (manifest.extras.get("adam_m"), manifest.extras.get("adam_v")) {
        (Some(m), Some(v)) => {
            let mut first_moment = model.denoiser.zeros_like();
            let mut second_moment = model.denoiser.zeros_like();
            read_group(dir, m, &mut first_moment)?;
            read_group(dir, v, &mut second_moment)?;
            Some(OptimizerState {
                first_moment,
                second_moment,
            })
        }
        _ => None,
    };
    let manifest_bytes = fs::read(dir.join(MANIFEST_FILE))?;
    Ok(LoadedCheckpoint {
        model,
        step: manifest.step,
        optimizer,
        manifest_hash: hex(&Sha256::digest(&manifest_bytes)),
    })
}

/// Joint positions in world space, ready for playback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionExport {
    pub fps: u32,
    pub frames: usize,
    pub joint_names: Vec<String>,
    pub parents: Vec<i32>,
    /// `frames × joints × 3`, meters, y up.
    pub positions: Vec<Vec<[f32; 3]>>,
}

/// Forward kinematics from (denormalized) features: the root integrates its
/// planar velocity and sits at rest height plus the root-height channel;
/// joints are the root plus their offsets.
pub fn export_motion(motion: &MotionSequence) -> MotionExport {
    let skeleton = Skeleton::default();
    let f = &motion.features;
    let (mut x, mut z) = (0.0f64, 0.0f64);
    let positions = f
        .rows()
        .into_iter()
        .map(|row| {
            x += row[corpus::ROOT_VEL_X] as f64;
            z += row[corpus::ROOT_VEL_Z] as f64;
            let y = REST_ROOT_HEIGHT + row[corpus::ROOT_HEIGHT] as f64;
            (0..JOINTS)
                .map(|j| {
                    [
                        (x + row[corpus::joint_col(j, 0)] as f64) as f32,
                        (y + row[corpus::joint_col(j, 1)] as f64) as f32,
                        (z + row[corpus::joint_col(j, 2)] as f64) as f32,
                    ]
                })
                .collect()
        })
        .collect();
    MotionExport {
        fps: motion.fps,
        frames: motion.frames(),
        joint_names: skeleton.joint_names,
        parents: skeleton.parent_index,
        positions,
    }
}

/// Inverse of [`export_motion`].
pub fn import_motion(export: &MotionExport) -> Result<MotionSequence> {
    if export.positions.len() != export.frames || export.positions.iter().any(|p| p.len() != JOINTS) {
        return Err(Error::data("exported motion has inconsistent dimensions"));
    }
    let mut features = Array2::<f32>::zeros((export.frames, FEATURE_DIM));
    let (mut px, mut pz) = (0.0f64, 0.0f64);
    for (i, joints) in export.positions.iter().enumerate() {
        let root = joints[0];
        let (rx, ry, rz) = (root[0] as f64, root[1] as f64, root[2] as f64);
        features[[i, corpus::ROOT_HEIGHT]] = (ry - REST_ROOT_HEIGHT) as f32;
        features[[i, corpus::ROOT_VEL_X]] = (rx - px) as f32;
        features[[i, corpus::ROOT_VEL_Z]] = (rz - pz) as f32;
        px = rx;
        pz = rz;
        for (j, p) in joints.iter().enumerate() {
            features[[i, corpus::joint_col(j, 0)]] = (p[0] as f64 - rx) as f32;
            features[[i, corpus::joint_col(j, 1)]] = (p[1] as f64 - ry) as f32;
            features[[i, corpus::joint_col(j, 2)]] = (p[2] as f64 - rz) as f32;
        }
    }
    let mut m = MotionSequence::new(features)?;
    m.fps = export.fps;
    Ok(m)
}
