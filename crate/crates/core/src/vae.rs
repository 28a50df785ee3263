//! Set-latent shape VAE: encodes surface point sets into a small set of
//! latent tokens and decodes signed-distance values at query points. The
//! same model doubles as the fragment embedder for the assembly branch.
//!
//! Pipeline: `encode` cross-attends subsampled query points over the full
//! point set and refines with self-attention, producing per-token mean and
//! log-variance; `decode_latents` runs the decoder self-attention stack plus
//! a final linear map; `decode_sdf` cross-attends embedded query coordinates
//! over the decoded tokens. Signs are positive outside the surface.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{NodeId, Session};
use crate::mesh::{marching_cubes, TriangleMesh};
use crate::nn::{Block, LayerNorm, Linear};
use crate::scalar::{s, Scalar};
use crate::store::ParamStore;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no iso-surface crossing in the sampled field")]
    EmptySurface,
}

/// Fourier feature map for 3-D coordinates: the raw point plus
/// sin/cos at `num_frequencies` octaves, `3 + 6 * num_frequencies` columns.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default)]
pub struct FourierEmbedder {
    pub num_frequencies: usize,
    pub base_scale: f64,
}

impl Default for FourierEmbedder {
    fn default() -> Self {
        FourierEmbedder { num_frequencies: 8, base_scale: 1.0 }
    }
}

impl FourierEmbedder {
    pub fn out_dim(&self) -> usize {
        3 + 6 * self.num_frequencies
    }

    pub fn embed<S: Scalar>(&self, points: &Array2<S>) -> Array2<S> {
        assert_eq!(points.ncols(), 3, "points must be (n, 3)");
        let n = points.nrows();
        let mut out = Array2::zeros((n, self.out_dim()));
        for i in 0..n {
            for c in 0..3 {
                out[(i, c)] = points[(i, c)];
            }
            let mut col = 3;
            for k in 0..self.num_frequencies {
                let w = std::f64::consts::PI * self.base_scale * (1u64 << k) as f64;
                for c in 0..3 {
                    let x = points[(i, c)].widen();
                    out[(i, col)] = s((w * x).sin());
                    out[(i, col + 1)] = s((w * x).cos());
                    col += 2;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default)]
pub struct VaeConfig {
    /// Token/channel width d.
    pub width: usize,
    pub heads: usize,
    /// Self-attention layers after the encoder cross-attention.
    pub encoder_depth: usize,
    /// Self-attention layers in the latent decoder.
    pub decoder_depth: usize,
    /// Token count used when encoding a whole (unfractured) shape.
    pub whole_tokens: usize,
    pub kl_weight: f64,
    pub embedder: FourierEmbedder,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            width: 64,
            heads: 4,
            encoder_depth: 2,
            decoder_depth: 2,
            whole_tokens: 64,
            kl_weight: 1e-4,
            embedder: FourierEmbedder::default(),
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.width % self.heads != 0 {
            return Err(format!(
                "vae width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.encoder_depth < 1 || self.decoder_depth < 1 {
            return Err("vae encoder/decoder depth must be >= 1".into());
        }
        if self.whole_tokens < 1 {
            return Err("vae whole_tokens must be >= 1".into());
        }
        if self.embedder.num_frequencies < 1 {
            return Err("vae embedder needs at least one frequency".into());
        }
        Ok(())
    }
}

/// Per-token posterior statistics from the encoder.
#[derive(Debug, Clone, Copy)]
pub struct LatentStats {
    pub mu: NodeId,
    pub logvar: NodeId,
}

/// Number of latent tokens for a fragment of `m` sampled points:
/// downsample by 4, never below 4 tokens.
pub fn fragment_token_count(m: usize) -> usize {
    m.div_ceil(4).max(4)
}

/// Evenly strided row indices: `k` distinct picks from `0..n` (`k <= n`).
pub fn strided_indices(n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot pick {k} of {n}");
    (0..k).map(|i| i * n / k).collect()
}

pub fn gather_rows<S: Scalar>(a: &Array2<S>, idx: &[usize]) -> Array2<S> {
    let mut out = Array2::zeros((idx.len(), a.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&a.row(i));
    }
    out
}

pub struct Vae {
    pub cfg: VaeConfig,
    input_proj: Linear,
    enc_cross: Block,
    enc_self: Vec<Block>,
    enc_norm: LayerNorm,
    enc_head: Linear,
    dec_self: Vec<Block>,
    dec_out: Linear,
    sdf_proj: Linear,
    sdf_cross: Block,
    sdf_norm: LayerNorm,
    sdf_head: Linear,
}

impl Vae {
    /// Registers all parameters under the `vae.` name prefix.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        cfg: &VaeConfig,
    ) -> Self {
        cfg.validate().expect("invalid vae config");
        let d = cfg.width;
        let f = cfg.embedder.out_dim();
        let input_proj = Linear::new(store, rng, "vae.enc.input_proj", f, d);
        let enc_cross = Block::new(store, rng, "vae.enc.cross", d, cfg.heads);
        let enc_self = (0..cfg.encoder_depth)
            .map(|i| Block::new(store, rng, &format!("vae.enc.self{i}"), d, cfg.heads))
            .collect();
        let enc_norm = LayerNorm::new(store, "vae.enc.norm", d);
        let enc_head = Linear::new(store, rng, "vae.enc.head", d, 2 * d);
        let dec_self = (0..cfg.decoder_depth)
            .map(|i| Block::new(store, rng, &format!("vae.dec.self{i}"), d, cfg.heads))
            .collect();
        let dec_out = Linear::new(store, rng, "vae.dec.out", d, d);
        let sdf_proj = Linear::new(store, rng, "vae.sdf.query_proj", f, d);
        let sdf_cross = Block::new(store, rng, "vae.sdf.cross", d, cfg.heads);
        let sdf_norm = LayerNorm::new(store, "vae.sdf.norm", d);
        let sdf_head = Linear::new(store, rng, "vae.sdf.head", d, 1);
        Vae {
            cfg: cfg.clone(),
            input_proj,
            enc_cross,
            enc_self,
            enc_norm,
            enc_head,
            dec_self,
            dec_out,
            sdf_proj,
            sdf_cross,
            sdf_norm,
            sdf_head,
        }
    }

    /// Encodes a point set: queries cross-attend over the full set, the
    /// result runs through the encoder self-attention stack, and a final
    /// head produces per-token mean and log-variance.
    pub fn encode<S: Scalar>(
        &self,
        sess: &mut Session<S>,
        points: &Array2<S>,
        queries: &Array2<S>,
    ) -> Result<LatentStats, VaeError> {
        if queries.nrows() == 0 || points.nrows() == 0 {
            return Err(VaeError::EmptyInput("encode needs points and queries"));
        }
        if points.ncols() != 3 || queries.ncols() != 3 {
            return Err(VaeError::ShapeMismatch(format!(
                "expected (n, 3) coordinates, got {:?} and {:?}",
                points.dim(),
                queries.dim()
            )));
        }
        let gq = sess.tape.constant(self.cfg.embedder.embed(queries));
        let gk = sess.tape.constant(self.cfg.embedder.embed(points));
        let q = self.input_proj.fwd(sess, gq);
        let kv = self.input_proj.fwd(sess, gk);
        let mut h = self.enc_cross.fwd_cross(sess, q, kv);
        for blk in &self.enc_self {
            h = blk.fwd_self(sess, h);
        }
        let h = self.enc_norm.fwd(sess, h);
        let stats = self.enc_head.fwd(sess, h);
        let d = self.cfg.width;
        let mu = sess.tape.slice_cols(stats, 0, d);
        let logvar = sess.tape.slice_cols(stats, d, d);
        Ok(LatentStats { mu, logvar })
    }

    /// Latent sample: `mu + exp(logvar / 2) * eps` when noise is supplied,
    /// the posterior mean otherwise.
    pub fn latent_sample<S: Scalar>(
        &self,
        sess: &mut Session<S>,
        stats: &LatentStats,
        eps: Option<&Array2<S>>,
    ) -> NodeId {
        match eps {
            None => stats.mu,
            Some(e) => {
                let half = sess.tape.scale(stats.logvar, s::<S>(0.5));
                let std = sess.tape.exp(half);
                let e = sess.tape.constant(e.clone());
                let noise = sess.tape.mul(std, e);
                sess.tape.add(stats.mu, noise)
            }
        }
    }

    /// Decoder self-attention stack plus the final linear map.
    pub fn decode_latents<S: Scalar>(&self, sess: &mut Session<S>, z: NodeId) -> NodeId {
        let mut h = z;
        for blk in &self.dec_self {
            h = blk.fwd_self(sess, h);
        }
        self.dec_out.fwd(sess, h)
    }

    /// Signed distance at each query point, one column.
    pub fn decode_sdf<S: Scalar>(
        &self,
        sess: &mut Session<S>,
        z_tilde: NodeId,
        x: &Array2<S>,
    ) -> Result<NodeId, VaeError> {
        if x.ncols() != 3 {
            return Err(VaeError::ShapeMismatch(format!(
                "sdf queries must be (q, 3), got {:?}",
                x.dim()
            )));
        }
        let gx = sess.tape.constant(self.cfg.embedder.embed(x));
        let q = self.sdf_proj.fwd(sess, gx);
        let h = self.sdf_cross.fwd_cross(sess, q, z_tilde);
        let h = self.sdf_norm.fwd(sess, h);
        Ok(self.sdf_head.fwd(sess, h))
    }

    /// KL divergence of the per-token Gaussian posterior from the unit
    /// Gaussian, averaged over all token/channel entries.
    pub fn kl<S: Scalar>(&self, sess: &mut Session<S>, stats: &LatentStats) -> NodeId {
        let mu2 = sess.tape.mul(stats.mu, stats.mu);
        let var = sess.tape.exp(stats.logvar);
        let sum = sess.tape.add(mu2, var);
        let sum = sess.tape.sub(sum, stats.logvar);
        let sum = sess.tape.add_scalar(sum, s::<S>(-1.0));
        let mean = sess.tape.mean_all(sum);
        sess.tape.scale(mean, s::<S>(0.5))
    }

    /// Reconstruction objective: mean squared SDF error, plus the weighted
    /// KL term when the weight is nonzero (exactly the regression loss when
    /// it is zero).
    pub fn reconstruction_loss<S: Scalar>(
        &self,
        sess: &mut Session<S>,
        pred_sdf: NodeId,
        target_sdf: &Array2<S>,
        stats: &LatentStats,
    ) -> NodeId {
        let target = sess.tape.constant(target_sdf.clone());
        let mse = sess.tape.mse(pred_sdf, target);
        if self.cfg.kl_weight == 0.0 {
            return mse;
        }
        let kl = self.kl(sess, stats);
        let weighted = sess.tape.scale(kl, s::<S>(self.cfg.kl_weight));
        sess.tape.add(mse, weighted)
    }

    /// Fragment feature tokens: encode with a 4x-downsampled query set and
    /// return the decoded latents of the posterior mean.
    pub fn embed_fragment<S: Scalar>(
        &self,
        sess: &mut Session<S>,
        points: &Array2<S>,
    ) -> Result<NodeId, VaeError> {
        let m = points.nrows();
        if m < 4 {
            return Err(VaeError::EmptyInput("fragment has fewer than 4 points"));
        }
        let k = fragment_token_count(m).min(m);
        let queries = gather_rows(points, &strided_indices(m, k));
        let stats = self.encode(sess, points, &queries)?;
        let z = self.latent_sample(sess, &stats, None);
        Ok(self.decode_latents(sess, z))
    }

    /// No-grad SDF evaluation of decoded latents at arbitrary points,
    /// chunked to bound tape size.
    pub fn sdf_values<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        z_tilde: &Array2<S>,
        x: &Array2<S>,
    ) -> Result<Vec<S>, VaeError> {
        let chunk = 4096;
        let mut out = Vec::with_capacity(x.nrows());
        let mut start = 0;
        while start < x.nrows() {
            let len = chunk.min(x.nrows() - start);
            let part = x.slice(ndarray::s![start..start + len, ..]).to_owned();
            let mut sess = Session::new(store);
            let zt = sess.tape.constant(z_tilde.clone());
            let pred = self.decode_sdf(&mut sess, zt, &part)?;
            let vals = sess.tape.value(pred);
            out.extend(vals.column(0).iter().copied());
            start += len;
        }
        Ok(out)
    }

    /// No-grad latent decoding for sampling-time use.
    pub fn decode_latents_value<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        z: &Array2<S>,
    ) -> Array2<S> {
        let mut sess = Session::new(store);
        let zn = sess.tape.constant(z.clone());
        let out = self.decode_latents(&mut sess, zn);
        sess.tape.value(out).clone()
    }

    /// Extracts the zero iso-surface of the decoded SDF on a regular grid
    /// over [-1,1]^3.
    pub fn mesh_from_sdf<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        z_tilde: &Array2<S>,
        resolution: usize,
    ) -> Result<TriangleMesh<S>, VaeError> {
        assert!(
            (16..=256).contains(&resolution),
            "grid resolution {resolution} outside [16, 256]"
        );
        let r = resolution;
        let spacing = 2.0 / (r - 1) as f64;
        let mut pts = Array2::zeros((r * r * r, 3));
        let mut row = 0;
        for iz in 0..r {
            for iy in 0..r {
                for ix in 0..r {
                    pts[(row, 0)] = s::<S>(-1.0 + spacing * ix as f64);
                    pts[(row, 1)] = s::<S>(-1.0 + spacing * iy as f64);
                    pts[(row, 2)] = s::<S>(-1.0 + spacing * iz as f64);
                    row += 1;
                }
            }
        }
        let values = self.sdf_values(store, z_tilde, &pts)?;
        let mesh = marching_cubes(&values, [r, r, r], [-1.0; 3], [spacing; 3], 0.0);
        if mesh.is_empty() {
            return Err(VaeError::EmptySurface);
        }
        Ok(mesh)
    }
}
