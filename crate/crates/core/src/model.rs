//! The full joint model — shape VAE, pose branch, latent branch, and the
//! per-layer bridges — plus the single-file checkpoint container.
//!
//! Checkpoint layout (little-endian): magic `RFCK`, u32 format version,
//! u64 JSON header length, the JSON header (stage, step, seed, model
//! config, parameter table, optimizer presence), one f64 blob per parameter
//! in table order, optional optimizer moment blobs, and a trailing SHA-256
//! of everything before it. Writes go to a sibling temp file first and are
//! renamed into place.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapter::{AdapterError, AdapterLayer, BridgeOrder};
use crate::assembly::{AssemblyBranch, AssemblyConfig, AssemblyError, VelocityNodes};
use crate::autograd::{NodeId, Session};
use crate::generation::{GenerationBranch, GenerationConfig, GenerationError};
use crate::manifold::PoseState;
use crate::scalar::Scalar;
use crate::store::{AdamState, ParamStore};
use crate::vae::{Vae, VaeConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub vae: VaeConfig,
    pub assembly: AssemblyConfig,
    pub generation: GenerationConfig,
    pub bridge_order: BridgeOrder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vae: VaeConfig::default(),
            assembly: AssemblyConfig::default(),
            generation: GenerationConfig::default(),
            bridge_order: BridgeOrder::Sequential,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.vae.validate()?;
        self.assembly.validate()?;
        self.generation.validate()?;
        if self.assembly.token_width != self.vae.width {
            return Err(format!(
                "assembly token width {} must equal vae width {}",
                self.assembly.token_width, self.vae.width
            ));
        }
        if self.generation.token_width != self.vae.width {
            return Err(format!(
                "generation token width {} must equal vae width {}",
                self.generation.token_width, self.vae.width
            ));
        }
        if self.assembly.depth != self.generation.depth {
            return Err(format!(
                "branch depths must pair one-to-one: assembly {}, generation {}",
                self.assembly.depth, self.generation.depth
            ));
        }
        if self.assembly.width != self.generation.width {
            return Err(format!(
                "bridged branch widths must match: assembly {}, generation {}",
                self.assembly.width, self.generation.width
            ));
        }
        Ok(())
    }
}

pub struct JointModel {
    pub cfg: ModelConfig,
    pub vae: Vae,
    pub assembly: AssemblyBranch,
    pub generation: GenerationBranch,
    pub adapters: Vec<AdapterLayer>,
}

/// Assembly-side inputs to a joint forward pass.
pub struct FragmentBatch<'a, S: Scalar> {
    /// (M, vae width) fragment feature tokens, grouped and contiguous.
    pub tokens: NodeId,
    pub group_sizes: &'a [usize],
    pub poses: &'a [PoseState<S>],
}

impl JointModel {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
    ) -> Self {
        cfg.validate().expect("invalid model config");
        let vae = Vae::new(store, rng, &cfg.vae);
        let assembly = AssemblyBranch::new(store, rng, &cfg.assembly);
        let generation = GenerationBranch::new(store, rng, &cfg.generation);
        let adapters = (0..cfg.assembly.depth)
            .map(|k| {
                AdapterLayer::new(
                    store,
                    rng,
                    &format!("adapter{k}"),
                    cfg.assembly.width,
                    cfg.assembly.heads,
                )
            })
            .collect();
        JointModel { cfg: cfg.clone(), vae, assembly, generation, adapters }
    }

    /// Lockstep forward through both branches with the per-layer bridges.
    /// Both branches see the same time value; each layer runs its block,
    /// then the bridge exchanges updates before the next layer.
    pub fn joint_forward<S: Scalar>(
        &self,
        sess: &mut Session<S>,
        frags: &FragmentBatch<S>,
        z_t: NodeId,
        t: f64,
        cond: NodeId,
    ) -> Result<(VelocityNodes, NodeId), ModelError> {
        let mut h_asm =
            self.assembly
                .embed(sess, frags.tokens, frags.group_sizes, frags.poses, t)?;
        let mut h_gen = self.generation.embed(sess, z_t, t, cond)?;
        let mut saves = Vec::with_capacity(self.cfg.assembly.depth);
        for k in 0..self.cfg.assembly.depth {
            h_asm = self.assembly.layer(sess, k, h_asm, &saves);
            h_gen = self.generation.layer(sess, k, h_gen);
            let latent = self.generation.latent_rows(sess, h_gen);
            let (latent, asm) =
                self.adapters[k].bridge(sess, latent, h_asm, self.cfg.bridge_order)?;
            h_gen = self.generation.with_latent_rows(sess, h_gen, latent);
            h_asm = asm;
            saves.push(h_asm);
        }
        let vel = self.assembly.readout(sess, h_asm, frags.group_sizes);
        let v_z = self.generation.readout(sess, h_gen);
        Ok((vel, v_z))
    }
}

// --- checkpoint container ---------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"RFCK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ParamRecord {
    name: String,
    rows: usize,
    cols: usize,
    frozen: bool,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointHeader {
    stage: u8,
    step: u64,
    master_seed: u64,
    model: ModelConfig,
    params: Vec<ParamRecord>,
    optimizer_step: Option<u64>,
}

/// Everything needed to resume or evaluate: weights (always serialized in
/// f64), training position, and optional optimizer moments.
pub struct Checkpoint<S: Scalar> {
    pub stage: u8,
    pub step: u64,
    pub master_seed: u64,
    pub model_cfg: ModelConfig,
    pub store: ParamStore<S>,
    pub opt: Option<AdamState<S>>,
}

fn blob_of<S: Scalar>(a: &Array2<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len() * 8);
    for x in a.iter() {
        out.extend_from_slice(&x.widen().to_le_bytes());
    }
    out
}

fn array_from<S: Scalar>(
    bytes: &[u8],
    rows: usize,
    cols: usize,
) -> Result<Array2<S>, CheckpointError> {
    if bytes.len() != rows * cols * 8 {
        return Err(CheckpointError::Corrupt(format!(
            "blob of {} bytes for a {rows}x{cols} tensor",
            bytes.len()
        )));
    }
    let mut a = Array2::zeros((rows, cols));
    for (i, chunk) in bytes.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        a[(i / cols, i % cols)] = S::narrow(v);
    }
    Ok(a)
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    ckpt: &Checkpoint<S>,
) -> Result<(), CheckpointError> {
    let params: Vec<ParamRecord> = ckpt
        .store
        .ids()
        .map(|id| {
            let v = ckpt.store.value(id);
            ParamRecord {
                name: ckpt.store.name(id).to_string(),
                rows: v.nrows(),
                cols: v.ncols(),
                frozen: ckpt.store.is_frozen(id),
            }
        })
        .collect();
    let header = CheckpointHeader {
        stage: ckpt.stage,
        step: ckpt.step,
        master_seed: ckpt.master_seed,
        model: ckpt.model_cfg.clone(),
        params,
        optimizer_step: ckpt.opt.as_ref().map(|o| o.step),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CheckpointError::Corrupt(format!("header encode: {e}")))?;

    let mut body: Vec<u8> = Vec::new();
    body.extend_from_slice(CKPT_MAGIC);
    body.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    body.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    body.extend_from_slice(&header_json);
    for id in ckpt.store.ids() {
        body.extend_from_slice(&blob_of(ckpt.store.value(id)));
    }
    if let Some(opt) = &ckpt.opt {
        for a in opt.m.iter().chain(opt.v.iter()) {
            body.extend_from_slice(&blob_of(a));
        }
    }
    let digest = Sha256::digest(&body);
    body.extend_from_slice(&digest);

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&body)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 + 4 + 8 + 32 {
        return Err(CheckpointError::Corrupt("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let expect = Sha256::digest(body);
    if digest != expect.as_slice() {
        return Err(CheckpointError::Corrupt("checksum mismatch".into()));
    }
    if &body[0..4] != CKPT_MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(CheckpointError::Incompatible(format!(
            "format version {version}, expected {CKPT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    if body.len() < 16 + hlen {
        return Err(CheckpointError::Corrupt("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[16..16 + hlen])
        .map_err(|e| CheckpointError::Corrupt(format!("header decode: {e}")))?;

    let mut cursor = 16 + hlen;
    let mut take = |rows: usize, cols: usize| -> Result<Array2<S>, CheckpointError> {
        let n = rows * cols * 8;
        if cursor + n > body.len() {
            return Err(CheckpointError::Corrupt("truncated tensor data".into()));
        }
        let a = array_from(&body[cursor..cursor + n], rows, cols)?;
        cursor += n;
        Ok(a)
    };

    let mut store = ParamStore::new();
    for rec in &header.params {
        let value = take(rec.rows, rec.cols)?;
        let id = store.add(rec.name.clone(), value);
        if rec.frozen {
            let n = store.set_frozen_prefix(store.name(id).to_string().as_str(), true);
            debug_assert_eq!(n, 1);
        }
    }
    let opt = match header.optimizer_step {
        None => None,
        Some(step) => {
            let mut m = Vec::with_capacity(header.params.len());
            for rec in &header.params {
                m.push(take(rec.rows, rec.cols)?);
            }
            let mut v = Vec::with_capacity(header.params.len());
            for rec in &header.params {
                v.push(take(rec.rows, rec.cols)?);
            }
            Some(AdamState { step, m, v })
        }
    };
    if cursor != body.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} unexpected trailing bytes",
            body.len() - cursor
        )));
    }
    Ok(Checkpoint {
        stage: header.stage,
        step: header.step,
        master_seed: header.master_seed,
        model_cfg: header.model,
        store,
        opt,
    })
}

/// Rebuild the model wiring from a checkpoint and adopt its weights.
pub fn model_from_checkpoint<S: Scalar>(
    ckpt: &Checkpoint<S>,
) -> Result<(JointModel, ParamStore<S>), CheckpointError> {
    let mut store = ParamStore::new();
    // The init draws are immediately overwritten by the adopted values;
    // any seed works.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = JointModel::new(&mut store, &mut rng, &ckpt.model_cfg);
    adopt_values(&mut store, &ckpt.store)?;
    Ok((model, store))
}

/// Copies values (and frozen flags) from a loaded store into a freshly
/// constructed one, matching parameters by name. Errors when the name sets
/// differ — that means the checkpoint belongs to a different architecture.
pub fn adopt_values<S: Scalar>(
    fresh: &mut ParamStore<S>,
    loaded: &ParamStore<S>,
) -> Result<(), CheckpointError> {
    if fresh.len() != loaded.len() {
        return Err(CheckpointError::Incompatible(format!(
            "parameter count {} vs {}",
            fresh.len(),
            loaded.len()
        )));
    }
    let fresh_ids: Vec<_> = fresh.ids().collect();
    for id in fresh_ids {
        let name = fresh.name(id).to_string();
        let src = loaded.find(&name).ok_or_else(|| {
            CheckpointError::Incompatible(format!("missing parameter {name}"))
        })?;
        let sv = loaded.value(src);
        if sv.dim() != fresh.value(id).dim() {
            return Err(CheckpointError::Incompatible(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                sv.dim(),
                fresh.value(id).dim()
            )));
        }
        fresh.value_mut(id).assign(sv);
        fresh.set_frozen_prefix(&name, loaded.is_frozen(src));
    }
    Ok(())
}
