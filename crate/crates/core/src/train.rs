//! Two-stage trainer.
//!
//! Stage 1 warms up the assembly branch together with the shape
//! autoencoder: each item contributes a pose flow-matching loss plus an SDF
//! reconstruction loss (with KL regularizer) on the whole shape. Stage 2
//! activates the generation branch through the per-layer bridges and
//! optimizes `assembly + lambda_gen * generation` jointly, with the
//! autoencoder frozen by default, a linear condition-drop ramp, and random
//! missing-part augmentation.
//!
//! Both flows share one time draw per item, with noise at `t = 0`.
//!
//! Determinism: every stochastic choice in step `k` of stage `s` comes from
//! `ChaCha8Rng::seed_from_u64(master_seed)` on stream `s << 40 | (k + 1)`,
//! consumed in a fixed order. Resuming from a checkpoint therefore
//! reproduces the uninterrupted run bit for bit.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::assembly::{assembly_loss, AssemblyError};
use crate::autograd::Session;
use crate::config::TrainConfig;
use crate::dataset::{drop_exact, ArchiveReader, AssemblySample, DatasetError};
use crate::generation::{generation_loss, GenerationError};
use crate::manifold::{
    flow_targets, geodesic_interp, sample_uniform_rotation, FlowTarget, ManifoldError, PoseState,
};
use crate::model::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, FragmentBatch, JointModel,
    ModelError,
};
use crate::scalar::{s, Scalar};
use crate::store::{AdamState, ParamGrads, ParamStore};
use crate::vae::{gather_rows, strided_indices, VaeError};

/// Consecutive non-finite steps tolerated before training aborts.
pub const DIVERGENCE_PATIENCE: u32 = 50;

/// Errors surfaced while training.
#[derive(Debug, Error)]
pub enum TrainError {
    /// Loss or gradients stayed non-finite for [`DIVERGENCE_PATIENCE`]
    /// consecutive steps.
    #[error("training diverged: non-finite loss for {streak} consecutive steps (last step {step})")]
    DivergenceDetected {
        /// Length of the non-finite run.
        streak: u32,
        /// Global step index at which the run ended.
        step: u64,
    },
    /// The archive holds no samples.
    #[error("empty dataset")]
    EmptyDataset,
    /// A checkpoint does not match the configured architecture or stage.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    /// Noise-pose construction kept failing (cut-locus draws).
    #[error("could not draw a usable noise pose after {0} attempts")]
    NoisePose(usize),
    /// Filesystem failure.
    #[error("train io: {0}")]
    Io(#[from] std::io::Error),
    /// Dataset failure.
    #[error(transparent)]
    Data(#[from] DatasetError),
    /// Checkpoint serialization failure.
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    /// Model failure.
    #[error(transparent)]
    Model(#[from] ModelError),
    /// Assembly-branch failure.
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    /// Autoencoder failure.
    #[error(transparent)]
    Vae(#[from] VaeError),
    /// Generation-branch failure.
    #[error(transparent)]
    Generation(#[from] GenerationError),
    /// Manifold failure outside the retried noise-pose draw.
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    /// Training stage (1 or 2).
    pub stage: u8,
    /// Step index within the stage (0-based; this step has completed).
    pub step: u64,
    /// Total batch loss.
    pub loss: f64,
    /// Pose flow-matching component.
    pub loss_assembly: f64,
    /// SDF reconstruction + KL component (stage 1 only, else 0).
    pub loss_recon: f64,
    /// Latent flow-matching component, unweighted (stage 2 only, else 0).
    pub loss_generation: f64,
    /// Learning rate applied on this step.
    pub lr: f64,
    /// Condition-drop probability on this step (stage 2 only, else 0).
    pub drop_rate: f64,
    /// Whether the step produced finite loss and gradients and updated the
    /// parameters.
    pub finite: bool,
}

/// Losses and gradients contributed by one batch item.
pub struct ItemOutcome<S: Scalar> {
    /// Combined item loss.
    pub loss: f64,
    /// Pose flow component.
    pub loss_assembly: f64,
    /// Reconstruction component (stage 1).
    pub loss_recon: f64,
    /// Latent flow component, unweighted (stage 2).
    pub loss_generation: f64,
    /// Parameter gradients of the combined item loss.
    pub grads: ParamGrads<S>,
}

/// Read every sample of an archive into memory.
pub fn read_all_samples(path: &Path) -> Result<Vec<AssemblySample>, DatasetError> {
    let mut reader = ArchiveReader::open(path)?;
    (0..reader.len()).map(|i| reader.get(i)).collect()
}

/// Two-stage trainer holding the model, optimizer, and dataset.
pub struct Trainer<S: Scalar> {
    /// Full configuration.
    pub cfg: TrainConfig,
    /// Model wiring (parameter layout) shared by both stages.
    pub model: JointModel,
    /// Parameter values.
    pub store: ParamStore<S>,
    /// Optimizer moments.
    pub opt: AdamState<S>,
    /// Current stage (1 or 2).
    pub stage: u8,
    /// Next step index within the stage.
    pub step: u64,
    /// Seed that every stream derives from.
    pub master_seed: u64,
    data: Vec<AssemblySample>,
    nonfinite_streak: u32,
    // Per-sample caches, valid only while the autoencoder is frozen.
    whole_latents: Vec<Option<Array2<S>>>,
    frag_tokens: Vec<Option<Vec<Array2<S>>>>,
}

impl<S: Scalar> Trainer<S> {
    /// Fresh trainer at stage 1, step 0.
    pub fn new(cfg: TrainConfig, data: Vec<AssemblySample>) -> Result<Self, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = JointModel::new(&mut store, &mut init_rng, &cfg.model);
        let opt = AdamState::zeros_like(&store);
        let n = data.len();
        Ok(Trainer {
            master_seed: cfg.seed,
            cfg,
            model,
            store,
            opt,
            stage: 1,
            step: 0,
            data,
            nonfinite_streak: 0,
            whole_latents: vec![None; n],
            frag_tokens: vec![None; n],
        })
    }

    /// Resume from a checkpoint: same architecture, stage, step, and
    /// optimizer moments.
    pub fn from_checkpoint(
        cfg: TrainConfig,
        data: Vec<AssemblySample>,
        ckpt: Checkpoint<S>,
    ) -> Result<Self, TrainError> {
        if ckpt.model_cfg != cfg.model {
            return Err(TrainError::CheckpointMismatch(
                "model architecture differs from the config".into(),
            ));
        }
        let mut t = Trainer::new(cfg, data)?;
        crate::model::adopt_values(&mut t.store, &ckpt.store)?;
        t.opt = ckpt.opt.unwrap_or_else(|| AdamState::zeros_like(&t.store));
        t.stage = ckpt.stage;
        t.step = ckpt.step;
        t.master_seed = ckpt.master_seed;
        if t.stage == 2 {
            t.apply_stage2_freezes();
        }
        Ok(t)
    }

    /// Switch a finished stage-1 trainer to stage 2: apply the freeze
    /// flags, reset the optimizer and step counter, and invalidate caches.
    pub fn begin_stage2(&mut self) {
        self.apply_stage2_freezes();
        self.opt = AdamState::zeros_like(&self.store);
        self.stage = 2;
        self.step = 0;
        self.nonfinite_streak = 0;
        for c in &mut self.whole_latents {
            *c = None;
        }
        for c in &mut self.frag_tokens {
            *c = None;
        }
    }

    fn apply_stage2_freezes(&mut self) {
        self.store.set_frozen_prefix("vae.", self.cfg.freeze_vae_stage2);
        self.store
            .set_frozen_prefix("gen.", self.cfg.freeze_generation_stage2);
    }

    fn vae_is_frozen(&self) -> bool {
        self.stage == 2 && self.cfg.freeze_vae_stage2
    }

    /// Steps configured for the current stage.
    pub fn total_steps(&self) -> u64 {
        match self.stage {
            1 => self.cfg.stage1_steps,
            _ => self.cfg.stage2_steps,
        }
    }

    fn batch_size(&self) -> usize {
        match self.stage {
            1 => self.cfg.stage1_batch,
            _ => self.cfg.stage2_batch,
        }
    }

    fn step_rng(&self, stage: u8, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(((stage as u64) << 40) | (step + 1));
        rng
    }

    /// Posterior-mean latent of the whole shape, cached while the
    /// autoencoder is frozen.
    fn whole_latent(&mut self, index: usize) -> Result<Array2<S>, TrainError> {
        if self.vae_is_frozen() {
            if let Some(z) = &self.whole_latents[index] {
                return Ok(z.clone());
            }
        }
        let sample = &self.data[index];
        let idx = strided_indices(
            sample.whole_queries.nrows(),
            self.cfg.model.vae.whole_tokens,
        );
        let queries = gather_rows(&sample.whole_queries.mapv(s::<S>), &idx);
        let points = sample.whole_points.mapv(s::<S>);
        let mut sess = Session::new(&self.store);
        let stats = self.model.vae.encode(&mut sess, &points, &queries)?;
        let mu = sess.tape.value(stats.mu).clone();
        if self.vae_is_frozen() {
            self.whole_latents[index] = Some(mu.clone());
        }
        Ok(mu)
    }

    /// Feature tokens of fragment `frag` of sample `index`, cached while the
    /// autoencoder is frozen.
    fn fragment_tokens_value(
        &mut self,
        index: usize,
        frag: usize,
    ) -> Result<Array2<S>, TrainError> {
        if self.vae_is_frozen() {
            if let Some(cached) = &self.frag_tokens[index] {
                return Ok(cached[frag].clone());
            }
        }
        let sample = &self.data[index];
        let alloc = sample.budget_allocation(self.cfg.fragment_budget);
        let embed_one = |store: &ParamStore<S>,
                         model: &JointModel,
                         i: usize|
         -> Result<Array2<S>, TrainError> {
            let pts = sample.budgeted_points(i, alloc[i]).mapv(s::<S>);
            let mut sess = Session::new(store);
            let node = model.vae.embed_fragment(&mut sess, &pts)?;
            Ok(sess.tape.value(node).clone())
        };
        if self.vae_is_frozen() {
            let all: Vec<Array2<S>> = (0..sample.num_parts())
                .map(|i| embed_one(&self.store, &self.model, i))
                .collect::<Result<_, _>>()?;
            let out = all[frag].clone();
            self.frag_tokens[index] = Some(all);
            Ok(out)
        } else {
            embed_one(&self.store, &self.model, frag)
        }
    }

    fn draw_noisy_pose(
        gt: &PoseState<S>,
        t: S,
        rng: &mut ChaCha8Rng,
    ) -> Result<(PoseState<S>, FlowTarget<S>), TrainError> {
        // A Haar draw can land at the cut locus of the log map (rotation by
        // pi from the target), where the interpolant is undefined; redraw.
        for _ in 0..16 {
            let rot = sample_uniform_rotation(rng);
            let trans = nalgebra::Vector3::new(
                normal_scaled::<S>(rng, 0.5),
                normal_scaled::<S>(rng, 0.5),
                normal_scaled::<S>(rng, 0.5),
            );
            let noise = PoseState::new(rot, trans);
            let Ok(pose_t) = geodesic_interp(&noise, gt, t) else {
                continue;
            };
            let target = flow_targets(&pose_t, gt, t)?;
            return Ok((pose_t, target));
        }
        Err(TrainError::NoisePose(16))
    }

    /// Forward/backward for one batch item.
    ///
    /// The draw order from `rng` is fixed: shared time, stage-2 missing
    /// augmentation, per-fragment noise poses, then stage-specific tails
    /// (stage 1: SDF query picks, posterior noise; stage 2: latent noise,
    /// condition-drop coin). The shared time draw puts both flows' noise at
    /// `t = 0` on the same clock.
    pub fn item_pass(
        &mut self,
        stage: u8,
        index: usize,
        drop_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ItemOutcome<S>, TrainError> {
        let t_f64 = rng.gen::<f64>() * (1.0 - 1e-4);
        let t = s::<S>(t_f64);

        // Stage-2 missing-part augmentation: drop up to ceil(fraction * n)
        // observed fragments, clamped so at least two remain.
        let mut sample = self.data[index].clone();
        if stage == 2 && self.cfg.missing_prob > 0.0 {
            let coin = rng.gen::<f64>();
            if coin < self.cfg.missing_prob {
                let n = sample.num_parts();
                let desired = (self.cfg.missing_fraction * n as f64).ceil() as usize;
                let to_drop = desired.min(sample.observed_indices().len().saturating_sub(2));
                if to_drop > 0 {
                    drop_exact(&mut sample, to_drop, rng)?;
                }
            }
        }
        let observed = sample.observed_indices();

        // Noisy poses and flow targets, one per observed fragment.
        let mut poses_t = Vec::with_capacity(observed.len());
        let mut targets = Vec::with_capacity(observed.len());
        for &i in &observed {
            let gt = PoseState::new(
                crate::manifold::Rotation::from_matrix_unchecked(
                    sample.gt_poses[i].rot.matrix().map(|x| s::<S>(x)),
                ),
                sample.gt_poses[i].trans.map(|x| s::<S>(x)),
            );
            let (pose_t, target) = Self::draw_noisy_pose(&gt, t, rng)?;
            poses_t.push(pose_t);
            targets.push(target);
        }

        match stage {
            1 => self.stage1_item(&sample, index, &observed, &poses_t, &targets, t_f64, rng),
            _ => self.stage2_item(
                &sample, index, &observed, &poses_t, &targets, t_f64, drop_rate, rng,
            ),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn stage1_item(
        &mut self,
        sample: &AssemblySample,
        _index: usize,
        observed: &[usize],
        poses_t: &[PoseState<S>],
        targets: &[FlowTarget<S>],
        t: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ItemOutcome<S>, TrainError> {
        let mut sess = Session::new(&self.store);

        // Fragment tokens, embedded inside this session so the pose loss
        // trains the encoder too.
        let alloc = sample.budget_allocation(self.cfg.fragment_budget);
        let mut nodes = Vec::with_capacity(observed.len());
        let mut group_sizes = Vec::with_capacity(observed.len());
        for &i in observed {
            let pts = sample.budgeted_points(i, alloc[i]).mapv(s::<S>);
            let node = self.model.vae.embed_fragment(&mut sess, &pts)?;
            group_sizes.push(sess.tape.value(node).nrows());
            nodes.push(node);
        }
        let tokens = sess.tape.concat_rows(&nodes);

        // Assembly branch alone: with the bridges at exact identity the
        // joint pass computes the same velocities, so stage 1 skips them.
        let mut h = self
            .model
            .assembly
            .embed(&mut sess, tokens, &group_sizes, poses_t, t)?;
        let mut saves = Vec::with_capacity(self.cfg.model.assembly.depth);
        for k in 0..self.cfg.model.assembly.depth {
            h = self.model.assembly.layer(&mut sess, k, h, &saves);
            saves.push(h);
        }
        let vel = self.model.assembly.readout(&mut sess, h, &group_sizes);
        let la = assembly_loss(&mut sess, &vel, targets)?;

        // Whole-shape reconstruction: encode, sample the posterior, decode
        // signed distances at a random query subset.
        let qidx = strided_indices(
            sample.whole_queries.nrows(),
            self.cfg.model.vae.whole_tokens,
        );
        let enc_queries = gather_rows(&sample.whole_queries.mapv(s::<S>), &qidx);
        let points = sample.whole_points.mapv(s::<S>);
        let stats = self.model.vae.encode(&mut sess, &points, &enc_queries)?;

        let nq = sample.sdf_points.nrows();
        let picks: Vec<usize> = (0..self.cfg.sdf_queries)
            .map(|_| rng.gen_range(0..nq))
            .collect();
        let xq = gather_rows(&sample.sdf_points.mapv(s::<S>), &picks);
        let target_sdf = gather_rows(&sample.sdf_values.mapv(s::<S>), &picks);

        let eps = normal_array::<S>(
            self.cfg.model.vae.whole_tokens,
            self.cfg.model.vae.width,
            rng,
        );
        let z = self.model.vae.latent_sample(&mut sess, &stats, Some(&eps));
        let z_tilde = self.model.vae.decode_latents(&mut sess, z);
        let pred = self.model.vae.decode_sdf(&mut sess, z_tilde, &xq)?;
        let lr_node = self
            .model
            .vae
            .reconstruction_loss(&mut sess, pred, &target_sdf, &stats);

        let loss = sess.tape.add(la, lr_node);
        let grads = sess.grads(loss);
        Ok(ItemOutcome {
            loss: sess.tape.scalar_value(loss).widen(),
            loss_assembly: sess.tape.scalar_value(la).widen(),
            loss_recon: sess.tape.scalar_value(lr_node).widen(),
            loss_generation: 0.0,
            grads,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn stage2_item(
        &mut self,
        sample: &AssemblySample,
        index: usize,
        observed: &[usize],
        poses_t: &[PoseState<S>],
        targets: &[FlowTarget<S>],
        t: f64,
        drop_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ItemOutcome<S>, TrainError> {
        // Latent endpoints: data = posterior mean of the whole shape
        // (detached), noise fresh per item. Interpolate at the shared time.
        let z_data = self.whole_latent(index)?;
        let (n_tok, width) = z_data.dim();
        let z_noise = normal_array::<S>(n_tok, width, rng);
        let ts = s::<S>(t);
        let one_minus = s::<S>(1.0 - t);
        let z_t = &z_noise.mapv(|x| x * one_minus) + &z_data.mapv(|x| x * ts);
        let v_target = &z_data - &z_noise;

        let drop_coin = rng.gen::<f64>();
        let use_image = drop_coin >= drop_rate;

        let frozen_vae = self.vae_is_frozen();
        // Collect fragment token values first when frozen (cache path keeps
        // the encoder out of the graph); otherwise embed in-session below.
        let mut frozen_blocks = Vec::new();
        if frozen_vae {
            for &i in observed {
                frozen_blocks.push(self.fragment_tokens_value(index, i)?);
            }
        }

        let mut sess = Session::new(&self.store);
        let (tokens, group_sizes) = if frozen_vae {
            let group_sizes: Vec<usize> = frozen_blocks.iter().map(|b| b.nrows()).collect();
            let nodes: Vec<_> = frozen_blocks
                .iter()
                .map(|b| sess.tape.constant(b.clone()))
                .collect();
            (sess.tape.concat_rows(&nodes), group_sizes)
        } else {
            let alloc = sample.budget_allocation(self.cfg.fragment_budget);
            let mut nodes = Vec::with_capacity(observed.len());
            let mut group_sizes = Vec::with_capacity(observed.len());
            for &i in observed {
                let pts = sample.budgeted_points(i, alloc[i]).mapv(s::<S>);
                let node = self.model.vae.embed_fragment(&mut sess, &pts)?;
                group_sizes.push(sess.tape.value(node).nrows());
                nodes.push(node);
            }
            (sess.tape.concat_rows(&nodes), group_sizes)
        };

        let image = sample.silhouette.mapv(s::<S>);
        let cond = self
            .model
            .generation
            .condition(&mut sess, if use_image { Some(&image) } else { None })?;
        let z_node = sess.tape.constant(z_t);
        let batch = FragmentBatch {
            tokens,
            group_sizes: &group_sizes,
            poses: poses_t,
        };
        let (vel, v_z) = self.model.joint_forward(&mut sess, &batch, z_node, t, cond)?;
        let la = assembly_loss(&mut sess, &vel, targets)?;
        let lg = generation_loss(&mut sess, v_z, &v_target)?;
        let lg_scaled = sess.tape.scale(lg, s::<S>(self.cfg.lambda_gen));
        let loss = sess.tape.add(la, lg_scaled);
        let grads = sess.grads(loss);
        Ok(ItemOutcome {
            loss: sess.tape.scalar_value(loss).widen(),
            loss_assembly: sess.tape.scalar_value(la).widen(),
            loss_recon: 0.0,
            loss_generation: sess.tape.scalar_value(lg).widen(),
            grads,
        })
    }

    /// Run one optimizer step: draw a batch, accumulate per-item gradients,
    /// and apply the AdamW update (skipped while non-finite).
    pub fn train_step(&mut self) -> Result<StepRecord, TrainError> {
        let stage = self.stage;
        let step = self.step;
        let total = self.total_steps();
        let batch = self.batch_size();
        let drop_rate = if stage == 2 {
            self.cfg.drop_rate_at(step, total)
        } else {
            0.0
        };
        let lr = self.cfg.optim.lr_at(step, total);

        let mut rng = self.step_rng(stage, step);
        let indices: Vec<usize> = (0..batch)
            .map(|_| rng.gen_range(0..self.data.len()))
            .collect();

        let mut grads = ParamGrads::zeros(self.store.len());
        let mut loss = 0.0;
        let mut loss_assembly = 0.0;
        let mut loss_recon = 0.0;
        let mut loss_generation = 0.0;
        for &index in &indices {
            let item = self.item_pass(stage, index, drop_rate, &mut rng)?;
            loss += item.loss;
            loss_assembly += item.loss_assembly;
            loss_recon += item.loss_recon;
            loss_generation += item.loss_generation;
            grads.merge(item.grads);
        }
        let inv_b = 1.0 / batch as f64;
        grads.scale(s::<S>(inv_b));
        loss *= inv_b;
        loss_assembly *= inv_b;
        loss_recon *= inv_b;
        loss_generation *= inv_b;

        let finite = loss.is_finite() && grads.all_finite();
        if finite {
            self.nonfinite_streak = 0;
            adamw_update(&mut self.store, &mut self.opt, &grads, lr, &self.cfg);
        } else {
            self.nonfinite_streak += 1;
            if self.nonfinite_streak >= DIVERGENCE_PATIENCE {
                return Err(TrainError::DivergenceDetected {
                    streak: self.nonfinite_streak,
                    step,
                });
            }
        }
        self.step += 1;
        Ok(StepRecord {
            stage,
            step,
            loss,
            loss_assembly,
            loss_recon,
            loss_generation,
            lr,
            drop_rate,
            finite,
        })
    }

    /// Snapshot for saving.
    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint {
            stage: self.stage,
            step: self.step,
            master_seed: self.master_seed,
            model_cfg: self.cfg.model.clone(),
            store: self.store.clone(),
            opt: Some(self.opt.clone()),
        }
    }

    /// Run the current stage to completion, invoking `on_record` for every
    /// step and checkpointing every `checkpoint_every` steps plus at the
    /// end. Returns the final checkpoint.
    pub fn run(
        &mut self,
        on_record: &mut dyn FnMut(&StepRecord),
    ) -> Result<Checkpoint<S>, TrainError> {
        let total = self.total_steps();
        std::fs::create_dir_all(&self.cfg.out_dir)?;
        let ckpt_path = self.cfg.out_dir.join(format!("stage{}.ckpt", self.stage));
        while self.step < total {
            let record = self.train_step()?;
            on_record(&record);
            if self.step % self.cfg.checkpoint_every == 0 && self.step < total {
                save_checkpoint(&ckpt_path, &self.checkpoint())?;
            }
        }
        let ckpt = self.checkpoint();
        save_checkpoint(&ckpt_path, &ckpt)?;
        Ok(ckpt)
    }
}

/// Decoupled AdamW update; frozen parameters are skipped entirely.
pub fn adamw_update<S: Scalar>(
    store: &mut ParamStore<S>,
    opt: &mut AdamState<S>,
    grads: &ParamGrads<S>,
    lr: f64,
    cfg: &TrainConfig,
) {
    opt.step += 1;
    let b1 = cfg.optim.beta1;
    let b2 = cfg.optim.beta2;
    let bc1 = 1.0 - b1.powi(opt.step as i32);
    let bc2 = 1.0 - b2.powi(opt.step as i32);
    let sb1 = s::<S>(b1);
    let sb2 = s::<S>(b2);
    let nb1 = s::<S>(1.0 - b1);
    let nb2 = s::<S>(1.0 - b2);
    let eps = s::<S>(cfg.optim.eps);
    let step_size = s::<S>(lr / bc1);
    let denom_scale = s::<S>(1.0 / bc2.sqrt());
    let decay = s::<S>(lr * cfg.optim.weight_decay);
    let ids: Vec<_> = store.ids().collect();
    for (slot, id) in ids.into_iter().enumerate() {
        if store.is_frozen(id) {
            continue;
        }
        let zeros;
        let g = match grads.get(id) {
            Some(g) => g,
            None => {
                zeros = Array2::zeros(store.value(id).dim());
                &zeros
            }
        };
        let m = &mut opt.m[slot];
        let v = &mut opt.v[slot];
        ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
            *m = *m * sb1 + g * nb1;
        });
        ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
            *v = *v * sb2 + g * g * nb2;
        });
        let w = store.value_mut(id);
        ndarray::Zip::from(&mut *w)
            .and(&*m)
            .and(&*v)
            .for_each(|w, &m, &v| {
                let update = step_size * m / (num_traits::Float::sqrt(v) * denom_scale + eps);
                *w = *w - update - decay * *w;
            });
    }
}

/// Train stage 1 from scratch per the config, writing checkpoints under
/// `cfg.out_dir`.
pub fn train_stage1<S: Scalar>(
    cfg: &TrainConfig,
    data: Vec<AssemblySample>,
    on_record: &mut dyn FnMut(&StepRecord),
) -> Result<Checkpoint<S>, TrainError> {
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    trainer.run(on_record)
}

/// Train stage 2 starting from a stage-1 checkpoint.
pub fn train_stage2<S: Scalar>(
    cfg: &TrainConfig,
    stage1: Checkpoint<S>,
    data: Vec<AssemblySample>,
    on_record: &mut dyn FnMut(&StepRecord),
) -> Result<Checkpoint<S>, TrainError> {
    if stage1.stage != 1 {
        return Err(TrainError::CheckpointMismatch(format!(
            "stage 2 needs a stage-1 checkpoint, got stage {}",
            stage1.stage
        )));
    }
    let mut trainer = Trainer::from_checkpoint(cfg.clone(), data, stage1)?;
    trainer.begin_stage2();
    trainer.run(on_record)
}

/// Resume whichever stage a checkpoint was saved in.
pub fn resume_training<S: Scalar>(
    cfg: &TrainConfig,
    path: &Path,
    data: Vec<AssemblySample>,
    on_record: &mut dyn FnMut(&StepRecord),
) -> Result<Checkpoint<S>, TrainError> {
    let ckpt = load_checkpoint::<S>(path)?;
    let mut trainer = Trainer::from_checkpoint(cfg.clone(), data, ckpt)?;
    trainer.run(on_record)
}

fn normal_scaled<S: Scalar>(rng: &mut ChaCha8Rng, scale: f64) -> S {
    let x: f64 = StandardNormal.sample(rng);
    s::<S>(scale * x)
}

fn normal_array<S: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<S> {
    Array2::from_shape_fn((rows, cols), |_| {
        let x: f64 = StandardNormal.sample(rng);
        s::<S>(x)
    })
}
