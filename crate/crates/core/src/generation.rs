//! Whole-shape latent branch: a transformer over the latent token set that
//! predicts the rectified-flow velocity toward the data latent, with
//! optional image conditioning from a small convolutional silhouette
//! encoder and classifier-free guidance at sampling time.
//!
//! Condition tokens are prepended to the latent tokens for the
//! self-attention stack; the velocity readout uses only the latent rows,
//! with a zero-initialized final projection.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{NodeId, Session};
use crate::nn::{Block, ConvEncoder, LayerNorm, Linear, TimeEmbed};
use crate::scalar::{s, Scalar};
use crate::store::ParamStore;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("bad image shape: {0}")]
    BadImageShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default)]
pub struct GenerationConfig {
    /// Transformer width.
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    /// Width of the latent tokens flowing in and out (the shape-VAE width).
    pub token_width: usize,
    pub time_frequencies: usize,
    /// Silhouette side length fed to the condition encoder.
    pub image_size: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            width: 64,
            heads: 4,
            depth: 6,
            token_width: 64,
            time_frequencies: 8,
            image_size: 64,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.width % self.heads != 0 {
            return Err(format!(
                "generation width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.depth < 1 {
            return Err("generation depth must be >= 1".into());
        }
        if self.image_size % 16 != 0 {
            return Err("image size must be divisible by 16".into());
        }
        Ok(())
    }

    /// Condition token count produced by the patch encoder.
    pub fn condition_tokens(&self) -> usize {
        (self.image_size / 16) * (self.image_size / 16)
    }
}

/// Image conditioning as data: token matrix plus an explicit null marker.
/// Null conditions always carry all-zero tokens.
#[derive(Debug, Clone)]
pub struct ConditionVector<S: Scalar> {
    pub tokens: Array2<S>,
    pub null_flag: bool,
}

impl<S: Scalar> ConditionVector<S> {
    pub fn null(tokens: usize, width: usize) -> Self {
        ConditionVector { tokens: Array2::zeros((tokens, width)), null_flag: true }
    }
}

pub struct GenerationBranch {
    pub cfg: GenerationConfig,
    input_proj: Linear,
    time: TimeEmbed,
    condition_encoder: ConvEncoder,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
    out_proj: Linear,
}

impl GenerationBranch {
    /// Registers all parameters under the `gen.` name prefix.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        cfg: &GenerationConfig,
    ) -> Self {
        cfg.validate().expect("invalid generation config");
        let d = cfg.width;
        let input_proj = Linear::new(store, rng, "gen.input_proj", cfg.token_width, d);
        let time = TimeEmbed::new(store, rng, "gen.time", cfg.time_frequencies, d);
        let condition_encoder =
            ConvEncoder::new(store, rng, "gen.cond", cfg.image_size, d);
        let blocks = (0..cfg.depth)
            .map(|k| Block::new(store, rng, &format!("gen.block{k}"), d, cfg.heads))
            .collect();
        let out_norm = LayerNorm::new(store, "gen.out_norm", d);
        let out_proj = Linear::zeroed(store, "gen.out_proj", d, cfg.token_width);
        GenerationBranch {
            cfg: cfg.clone(),
            input_proj,
            time,
            condition_encoder,
            blocks,
            out_norm,
            out_proj,
        }
    }

    /// Encodes a silhouette into condition tokens on the tape. `None` (the
    /// dropped/absent-image case) yields exactly-zero tokens without
    /// touching any image, so the output cannot depend on one.
    pub fn condition<S: Scalar>(
        &self,
        sess: &mut Session<S>,
        image: Option<&Array2<S>>,
    ) -> Result<NodeId, GenerationError> {
        let c = self.cfg.condition_tokens();
        match image {
            None => Ok(sess.tape.constant(Array2::zeros((c, self.cfg.width)))),
            Some(img) => {
                let px = self.cfg.image_size * self.cfg.image_size;
                if img.dim() != (1, px) {
                    return Err(GenerationError::BadImageShape(format!(
                        "expected (1, {px}) occupancy row, got {:?}",
                        img.dim()
                    )));
                }
                Ok(self.condition_encoder.fwd(sess, img))
            }
        }
    }

    /// Data-space condition encoding for samplers (no gradients retained).
    pub fn condition_value<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        image: Option<&Array2<S>>,
    ) -> Result<ConditionVector<S>, GenerationError> {
        match image {
            None => Ok(ConditionVector::null(
                self.cfg.condition_tokens(),
                self.cfg.width,
            )),
            Some(img) => {
                let mut sess = Session::new(store);
                let node = self.condition(&mut sess, Some(img))?;
                Ok(ConditionVector {
                    tokens: sess.tape.value(node).clone(),
                    null_flag: false,
                })
            }
        }
    }

    /// Initial sequence: condition tokens prepended to the time-shifted,
    /// projected latent tokens.
    pub fn embed<S: Scalar>(
        &self,
        sess: &mut Session<S>,
        z_t: NodeId,
        t: f64,
        cond: NodeId,
    ) -> Result<NodeId, GenerationError> {
        let zdim = sess.tape.value(z_t).dim();
        if zdim.1 != self.cfg.token_width {
            return Err(GenerationError::ShapeMismatch(format!(
                "latent tokens must have width {}, got {:?}",
                self.cfg.token_width, zdim
            )));
        }
        let cdim = sess.tape.value(cond).dim();
        if cdim != (self.cfg.condition_tokens(), self.cfg.width) {
            return Err(GenerationError::ShapeMismatch(format!(
                "condition tokens must be ({}, {}), got {:?}",
                self.cfg.condition_tokens(),
                self.cfg.width,
                cdim
            )));
        }
        let x = self.input_proj.fwd(sess, z_t);
        let te = self.time.fwd(sess, t);
        let x = sess.tape.add_row(x, te);
        Ok(sess.tape.concat_rows(&[cond, x]))
    }

    pub fn layer<S: Scalar>(&self, sess: &mut Session<S>, k: usize, h: NodeId) -> NodeId {
        self.blocks[k].fwd_self(sess, h)
    }

    /// The latent-token rows of a full sequence state.
    pub fn latent_rows<S: Scalar>(&self, sess: &mut Session<S>, h: NodeId) -> NodeId {
        let c = self.cfg.condition_tokens();
        let n = sess.tape.value(h).nrows() - c;
        sess.tape.slice_rows(h, c, n)
    }

    /// Reassembles a full sequence from its condition rows and replacement
    /// latent rows.
    pub fn with_latent_rows<S: Scalar>(
        &self,
        sess: &mut Session<S>,
        h: NodeId,
        latent: NodeId,
    ) -> NodeId {
        let c = self.cfg.condition_tokens();
        let cond = sess.tape.slice_rows(h, 0, c);
        sess.tape.concat_rows(&[cond, latent])
    }

    /// Velocity readout from the latent rows.
    pub fn readout<S: Scalar>(&self, sess: &mut Session<S>, h: NodeId) -> NodeId {
        let latent = self.latent_rows(sess, h);
        let normed = self.out_norm.fwd(sess, latent);
        self.out_proj.fwd(sess, normed)
    }

    /// Standalone forward pass. Returns the predicted latent velocity and
    /// each layer's latent-row states (for coupling or tests).
    pub fn forward<S: Scalar>(
        &self,
        sess: &mut Session<S>,
        z_t: NodeId,
        t: f64,
        cond: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>), GenerationError> {
        let mut h = self.embed(sess, z_t, t, cond)?;
        let mut states = Vec::with_capacity(self.cfg.depth);
        for k in 0..self.cfg.depth {
            h = self.layer(sess, k, h);
            states.push(self.latent_rows(sess, h));
        }
        Ok((self.readout(sess, h), states))
    }
}

/// Rectified-flow objective: mean squared deviation of the predicted
/// velocity from `z_data - z_noise`.
pub fn generation_loss<S: Scalar>(
    sess: &mut Session<S>,
    v_z: NodeId,
    target: &Array2<S>,
) -> Result<NodeId, GenerationError> {
    if sess.tape.value(v_z).dim() != target.dim() {
        return Err(GenerationError::ShapeMismatch(format!(
            "velocity {:?} vs target {:?}",
            sess.tape.value(v_z).dim(),
            target.dim()
        )));
    }
    let t = sess.tape.constant(target.clone());
    Ok(sess.tape.mse(v_z, t))
}

/// Classifier-free guidance: `v_uncond + scale * (v_cond - v_uncond)`.
pub fn cfg_combine<S: Scalar>(
    v_cond: &Array2<S>,
    v_uncond: &Array2<S>,
    guidance_scale: f64,
) -> Array2<S> {
    assert_eq!(v_cond.dim(), v_uncond.dim(), "guidance shape mismatch");
    let g = s::<S>(guidance_scale);
    v_uncond + &((v_cond - v_uncond).mapv(|x| x * g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_difference_check;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> GenerationConfig {
        GenerationConfig {
            width: 16,
            heads: 2,
            depth: 2,
            token_width: 8,
            time_frequencies: 2,
            image_size: 16,
        }
    }

    fn build(seed: u64, cfg: &GenerationConfig) -> (ParamStore<f64>, GenerationBranch) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branch = GenerationBranch::new(&mut store, &mut rng, cfg);
        (store, branch)
    }

    #[test]
    fn fresh_model_predicts_zero_velocity() {
        let cfg = tiny_cfg();
        let (store, branch) = build(3, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Array2::from_shape_fn((6, 8), |_| rng.gen_range(-1.0..1.0));
        let mut sess = Session::new(&store);
        let zn = sess.tape.constant(z);
        let cond = branch.condition(&mut sess, None).unwrap();
        let (v, states) = branch.forward(&mut sess, zn, 0.4, cond).unwrap();
        assert_eq!(states.len(), 2);
        assert_eq!(sess.tape.value(states[0]).dim(), (6, 16));
        let vv = sess.tape.value(v);
        assert_eq!(vv.dim(), (6, 8));
        assert!(vv.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn null_condition_ignores_the_image_exactly() {
        let cfg = tiny_cfg();
        let (store, branch) = build(5, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0));
        // Two very different images, both dropped: outputs must be equal
        // bit for bit because the null path never reads the image.
        let run = |_img: Array2<f64>| {
            let mut sess = Session::new(&store);
            let zn = sess.tape.constant(z.clone());
            let cond = branch.condition(&mut sess, None).unwrap();
            let (v, _) = branch.forward(&mut sess, zn, 0.7, cond).unwrap();
            sess.tape.value(v).clone()
        };
        let a = run(Array2::zeros((1, 256)));
        let b = run(Array2::from_elem((1, 256), 1.0));
        assert_eq!(a, b);

        let null = ConditionVector::<f64>::null(4, 16);
        assert!(null.null_flag);
        assert!(null.tokens.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn condition_encoder_distinguishes_black_from_white() {
        let cfg = tiny_cfg();
        let (store, branch) = build(7, &cfg);
        let black = branch
            .condition_value(&store, Some(&Array2::zeros((1, 256))))
            .unwrap();
        let white = branch
            .condition_value(&store, Some(&Array2::from_elem((1, 256), 1.0)))
            .unwrap();
        assert!(!black.null_flag && !white.null_flag);
        assert_eq!(black.tokens.dim(), (1, 16));
        assert_ne!(black.tokens, white.tokens);
    }

    #[test]
    fn bad_image_shape_is_rejected() {
        let cfg = tiny_cfg();
        let (store, branch) = build(11, &cfg);
        let mut sess = Session::new(&store);
        let img = Array2::<f64>::zeros((1, 100));
        assert!(matches!(
            branch.condition(&mut sess, Some(&img)),
            Err(GenerationError::BadImageShape(_))
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let (store, branch) = build(13, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Array2::from_shape_fn((5, 8), |_| rng.gen_range(-1.0..1.0));
        let img = Array2::from_shape_fn((1, 256), |_| rng.gen_range(0.0..1.0));
        let run = || {
            let mut sess = Session::new(&store);
            let zn = sess.tape.constant(z.clone());
            let cond = branch.condition(&mut sess, Some(&img)).unwrap();
            let (v, _) = branch.forward(&mut sess, zn, 0.25, cond).unwrap();
            sess.tape.value(v).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_matches_brute_force() {
        let cfg = tiny_cfg();
        let (store, _) = build(17, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Array2::from_shape_fn((3, 8), |_| rng.gen_range(-1.0..1.0));
        let target = Array2::from_shape_fn((3, 8), |_| rng.gen_range(-1.0..1.0));
        let brute: f64 =
            v.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                / 24.0;
        let mut sess = Session::new(&store);
        let vn = sess.tape.constant(v.clone());
        let loss = generation_loss(&mut sess, vn, &target).unwrap();
        approx::assert_abs_diff_eq!(sess.tape.scalar_value(loss), brute, epsilon = 1e-12);

        // Exact hit -> 0; off by one everywhere -> mean squared = 1.
        let tn = sess.tape.constant(target.clone());
        let zero = generation_loss(&mut sess, tn, &target).unwrap();
        assert_eq!(sess.tape.scalar_value(zero), 0.0);
        let off = sess.tape.constant(&target + 1.0);
        let one = generation_loss(&mut sess, off, &target).unwrap();
        approx::assert_abs_diff_eq!(sess.tape.scalar_value(one), 1.0, epsilon = 1e-12);

        let bad = sess.tape.constant(Array2::<f64>::zeros((2, 8)));
        assert!(matches!(
            generation_loss(&mut sess, bad, &target),
            Err(GenerationError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn guidance_combination_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vc = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
        let vu = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
        let zero = cfg_combine(&vc, &vu, 0.0);
        assert_eq!(zero, vu);
        let one = cfg_combine(&vc, &vu, 1.0);
        for (a, b) in one.iter().zip(vc.iter()) {
            approx::assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        let two = cfg_combine(
            &Array2::from_elem((2, 2), 1.0),
            &Array2::zeros((2, 2)),
            2.0,
        );
        assert!(two.iter().all(|&x| x == 2.0));

        // Collinearity in the scale: g=2 output equals uncond + 2*(g=1 - g=0).
        let g0 = cfg_combine(&vc, &vu, 0.0);
        let g1 = cfg_combine(&vc, &vu, 1.0);
        let g2 = cfg_combine(&vc, &vu, 2.0);
        for i in 0..4 {
            for j in 0..6 {
                let predicted = g0[(i, j)] + 2.0 * (g1[(i, j)] - g0[(i, j)]);
                approx::assert_abs_diff_eq!(g2[(i, j)], predicted, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = GenerationConfig { depth: 1, ..tiny_cfg() };
        let (mut store, branch) = build(19, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0));
        let img = Array2::from_shape_fn((1, 256), |_| rng.gen_range(0.0..1.0));
        let target = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0));

        let loss_fn = |st: &ParamStore<f64>| {
            let mut sess = Session::new(st);
            let zn = sess.tape.constant(z.clone());
            let cond = branch.condition(&mut sess, Some(&img)).unwrap();
            let (v, _) = branch.forward(&mut sess, zn, 0.45, cond).unwrap();
            let loss = generation_loss(&mut sess, v, &target).unwrap();
            (sess.tape.scalar_value(loss), sess.grads(loss))
        };
        let mut slot_rng = ChaCha8Rng::seed_from_u64(7);
        let slots: Vec<_> = store
            .ids()
            .map(|id| (id, slot_rng.gen_range(0..store.value(id).len())))
            .collect();
        let check = finite_difference_check(&mut store, &slots, 1e-5, loss_fn);
        assert!(check.checked >= 30, "checked {}", check.checked);
        assert!(
            check.max_rel_err < 1e-4,
            "worst {} at {} [{}]",
            check.max_rel_err,
            check.worst_param,
            check.worst_flat_index
        );
    }
}
