//! Pose-denoising branch: a transformer over fragment feature tokens that
//! predicts one rotation velocity and one translation velocity per fragment
//! for flow matching on SO(3) x R^3.
//!
//! Fragment tokens arrive grouped and contiguous (fragment i owns
//! `group_sizes[i]` consecutive rows). The current pose of each fragment is
//! flattened to 12 numbers, linearly embedded, and added to that fragment's
//! tokens; a sinusoidal time embedding is added to every token. Mirrored
//! layers are fused U-Net style (concatenate + linear) and per-fragment
//! mean pooling feeds two small heads whose final layers start at zero, so a
//! fresh model predicts exactly zero velocity.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{NodeId, Session};
use crate::manifold::{FlowTarget, PoseState};
use crate::nn::{group_broadcast_matrix, group_mean_matrix, Block, LayerNorm, Linear, TimeEmbed};
use crate::scalar::{s, Scalar};
use crate::store::ParamStore;

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default)]
pub struct AssemblyConfig {
    /// Transformer width.
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    /// Width of the incoming fragment tokens (the shape-VAE width).
    pub token_width: usize,
    pub time_frequencies: usize,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        AssemblyConfig {
            width: 64,
            heads: 4,
            depth: 6,
            token_width: 64,
            time_frequencies: 8,
        }
    }
}

impl AssemblyConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.width % self.heads != 0 {
            return Err(format!(
                "assembly width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.depth < 1 {
            return Err("assembly depth must be >= 1".into());
        }
        if self.time_frequencies < 1 {
            return Err("assembly time_frequencies must be >= 1".into());
        }
        Ok(())
    }

    /// Layers whose input is fused with the mirrored earlier layer's output.
    fn fuses_at(&self, k: usize) -> bool {
        2 * k > self.depth - 1
    }
}

/// Per-fragment predicted velocities, one row each.
#[derive(Debug, Clone, Copy)]
pub struct VelocityNodes {
    /// (N, 3) rotation tangent velocities.
    pub rot: NodeId,
    /// (N, 3) translation velocities.
    pub trans: NodeId,
}

pub struct AssemblyBranch {
    pub cfg: AssemblyConfig,
    input_proj: Linear,
    pose_proj: Linear,
    time: TimeEmbed,
    blocks: Vec<Block>,
    fuses: Vec<Linear>,
    head_norm: LayerNorm,
    rot_hidden: Linear,
    rot_out: Linear,
    trans_hidden: Linear,
    trans_out: Linear,
}

impl AssemblyBranch {
    /// Registers all parameters under the `asm.` name prefix.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        cfg: &AssemblyConfig,
    ) -> Self {
        cfg.validate().expect("invalid assembly config");
        let d = cfg.width;
        let input_proj = Linear::new(store, rng, "asm.input_proj", cfg.token_width, d);
        let pose_proj = Linear::new(store, rng, "asm.pose_proj", 12, d);
        let time = TimeEmbed::new(store, rng, "asm.time", cfg.time_frequencies, d);
        let blocks = (0..cfg.depth)
            .map(|k| Block::new(store, rng, &format!("asm.block{k}"), d, cfg.heads))
            .collect();
        let fuses = (0..cfg.depth)
            .filter(|&k| cfg.fuses_at(k))
            .map(|k| Linear::new(store, rng, &format!("asm.fuse{k}"), 2 * d, d))
            .collect();
        let head_norm = LayerNorm::new(store, "asm.head_norm", d);
        let rot_hidden = Linear::new(store, rng, "asm.rot_head.hidden", d, d);
        let rot_out = Linear::zeroed(store, "asm.rot_head.out", d, 3);
        let trans_hidden = Linear::new(store, rng, "asm.trans_head.hidden", d, d);
        let trans_out = Linear::zeroed(store, "asm.trans_head.out", d, 3);
        AssemblyBranch {
            cfg: cfg.clone(),
            input_proj,
            pose_proj,
            time,
            blocks,
            fuses,
            head_norm,
            rot_hidden,
            rot_out,
            trans_hidden,
            trans_out,
        }
    }

    /// Initial token state: projected fragment tokens plus per-fragment pose
    /// embedding plus a global time embedding.
    pub fn embed<S: Scalar>(
        &self,
        sess: &mut Session<S>,
        tokens: NodeId,
        group_sizes: &[usize],
        poses: &[PoseState<S>],
        t: f64,
    ) -> Result<NodeId, AssemblyError> {
        let n = group_sizes.len();
        if n == 0 {
            return Err(AssemblyError::EmptyInput("no fragments"));
        }
        let m: usize = group_sizes.iter().sum();
        let tok_rows = sess.tape.value(tokens).nrows();
        if tok_rows != m || poses.len() != n {
            return Err(AssemblyError::ShapeMismatch(format!(
                "{tok_rows} token rows for group sizes summing {m}, {} poses for {n} fragments",
                poses.len()
            )));
        }
        if group_sizes.contains(&0) {
            return Err(AssemblyError::EmptyInput("fragment with zero tokens"));
        }
        let x = self.input_proj.fwd(sess, tokens);

        let mut pose_rows = Array2::zeros((n, 12));
        for (i, p) in poses.iter().enumerate() {
            let row = p.to_row12();
            for (j, v) in row.iter().enumerate() {
                pose_rows[(i, j)] = *v;
            }
        }
        let pose_feat = sess.tape.constant(pose_rows);
        let pose_emb = self.pose_proj.fwd(sess, pose_feat);
        let bcast = sess.tape.constant(group_broadcast_matrix::<S>(group_sizes));
        let pose_tok = sess.tape.matmul(bcast, pose_emb);
        let x = sess.tape.add(x, pose_tok);

        let te = self.time.fwd(sess, t);
        Ok(sess.tape.add_row(x, te))
    }

    /// Runs layer `k`, fusing the mirrored skip state when applicable.
    /// `saves` holds the finished output of every earlier layer.
    pub fn layer<S: Scalar>(
        &self,
        sess: &mut Session<S>,
        k: usize,
        h: NodeId,
        saves: &[NodeId],
    ) -> NodeId {
        let mut h = h;
        if self.cfg.fuses_at(k) {
            let mirror = saves[self.cfg.depth - 1 - k];
            let cat = sess.tape.concat_cols(&[h, mirror]);
            let fuse_idx = k - (self.cfg.depth - self.fuses.len());
            h = self.fuses[fuse_idx].fwd(sess, cat);
        }
        self.blocks[k].fwd_self(sess, h)
    }

    /// Mean-pools each fragment's tokens and applies the two velocity heads.
    pub fn readout<S: Scalar>(
        &self,
        sess: &mut Session<S>,
        h: NodeId,
        group_sizes: &[usize],
    ) -> VelocityNodes {
        let pool = sess.tape.constant(group_mean_matrix::<S>(group_sizes));
        let pooled = sess.tape.matmul(pool, h);
        let pooled = self.head_norm.fwd(sess, pooled);
        let rh = self.rot_hidden.fwd(sess, pooled);
        let rh = sess.tape.gelu(rh);
        let rot = self.rot_out.fwd(sess, rh);
        let th = self.trans_hidden.fwd(sess, pooled);
        let th = sess.tape.gelu(th);
        let trans = self.trans_out.fwd(sess, th);
        VelocityNodes { rot, trans }
    }

    /// Standalone forward pass: embed, all layers, readout. Returns the
    /// velocities and each layer's output state (for coupling or tests).
    pub fn forward<S: Scalar>(
        &self,
        sess: &mut Session<S>,
        tokens: NodeId,
        group_sizes: &[usize],
        poses: &[PoseState<S>],
        t: f64,
    ) -> Result<(VelocityNodes, Vec<NodeId>), AssemblyError> {
        let mut h = self.embed(sess, tokens, group_sizes, poses, t)?;
        let mut saves = Vec::with_capacity(self.cfg.depth);
        for k in 0..self.cfg.depth {
            h = self.layer(sess, k, h, &saves);
            saves.push(h);
        }
        let v = self.readout(sess, h, group_sizes);
        Ok((v, saves))
    }
}

/// Flow-matching objective: sum over fragments of the squared deviation of
/// both velocity predictions from their targets.
pub fn assembly_loss<S: Scalar>(
    sess: &mut Session<S>,
    pred: &VelocityNodes,
    targets: &[FlowTarget<S>],
) -> Result<NodeId, AssemblyError> {
    let n = sess.tape.value(pred.rot).nrows();
    if targets.len() != n || sess.tape.value(pred.trans).nrows() != n {
        return Err(AssemblyError::ShapeMismatch(format!(
            "{} targets for {} predicted fragments",
            targets.len(),
            n
        )));
    }
    let mut rot_t = Array2::zeros((n, 3));
    let mut trans_t = Array2::zeros((n, 3));
    for (i, ft) in targets.iter().enumerate() {
        for c in 0..3 {
            rot_t[(i, c)] = ft.rot_vel[c];
            trans_t[(i, c)] = ft.trans_vel[c];
        }
    }
    let rt = sess.tape.constant(rot_t);
    let tt = sess.tape.constant(trans_t);
    let dr = sess.tape.sub(pred.rot, rt);
    let dr2 = sess.tape.mul(dr, dr);
    let da = sess.tape.sub(pred.trans, tt);
    let da2 = sess.tape.mul(da, da);
    let lr = sess.tape.sum_all(dr2);
    let la = sess.tape.sum_all(da2);
    Ok(sess.tape.add(lr, la))
}

/// Removes the global translation gauge: subtracts the centroid of the
/// translations from every pose. Rotations are untouched.
pub fn anchor_gauge<S: Scalar>(poses: &[PoseState<S>]) -> Vec<PoseState<S>> {
    assert!(!poses.is_empty(), "anchor_gauge needs at least one pose");
    let mut centroid = nalgebra::Vector3::zeros();
    for p in poses {
        centroid += p.trans;
    }
    centroid /= s::<S>(poses.len() as f64);
    poses
        .iter()
        .map(|p| PoseState::new(p.rot.clone(), p.trans - centroid))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_difference_check;
    use crate::manifold::sample_uniform_rotation;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> AssemblyConfig {
        AssemblyConfig {
            width: 16,
            heads: 2,
            depth: 2,
            token_width: 8,
            time_frequencies: 2,
        }
    }

    fn build(seed: u64, cfg: &AssemblyConfig) -> (ParamStore<f64>, AssemblyBranch) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branch = AssemblyBranch::new(&mut store, &mut rng, cfg);
        (store, branch)
    }

    fn random_poses(rng: &mut ChaCha8Rng, n: usize) -> Vec<PoseState<f64>> {
        (0..n)
            .map(|_| {
                PoseState::new(
                    sample_uniform_rotation(rng),
                    Vector3::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    ),
                )
            })
            .collect()
    }

    #[test]
    fn fresh_model_predicts_zero_velocity() {
        let cfg = tiny_cfg();
        let (store, branch) = build(3, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tokens = Array2::from_shape_fn((5, 8), |_| rng.gen_range(-1.0..1.0));
        let poses = random_poses(&mut rng, 1);
        let mut sess = Session::new(&store);
        let tok = sess.tape.constant(tokens);
        let (v, states) = branch.forward(&mut sess, tok, &[5], &poses, 0.3).unwrap();
        assert_eq!(states.len(), 2);
        let rot = sess.tape.value(v.rot);
        let trans = sess.tape.value(v.trans);
        assert_eq!(rot.dim(), (1, 3));
        assert!(rot.iter().all(|&x| x == 0.0));
        assert!(trans.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fragment_permutation_permutes_velocity_rows() {
        let cfg = AssemblyConfig { depth: 3, ..tiny_cfg() };
        let (store, branch) = build(5, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sizes = [4usize, 6, 3];
        let m: usize = sizes.iter().sum();
        let tokens = Array2::from_shape_fn((m, 8), |_| rng.gen_range(-1.0..1.0));
        let poses = random_poses(&mut rng, 3);

        let run = |order: &[usize]| -> (Array2<f64>, Array2<f64>) {
            let mut tok_rows: Vec<Array2<f64>> = Vec::new();
            let mut offset = vec![0usize; 3];
            let mut acc = 0;
            for (i, &sz) in sizes.iter().enumerate() {
                offset[i] = acc;
                acc += sz;
            }
            let mut perm_sizes = Vec::new();
            let mut perm_poses = Vec::new();
            for &i in order {
                let block = tokens
                    .slice(ndarray::s![offset[i]..offset[i] + sizes[i], ..])
                    .to_owned();
                tok_rows.push(block);
                perm_sizes.push(sizes[i]);
                perm_poses.push(poses[i].clone());
            }
            let mut stacked = Array2::zeros((m, 8));
            let mut r = 0;
            for b in &tok_rows {
                stacked
                    .slice_mut(ndarray::s![r..r + b.nrows(), ..])
                    .assign(b);
                r += b.nrows();
            }
            let mut sess = Session::new(&store);
            let tok = sess.tape.constant(stacked);
            let (v, _) = branch
                .forward(&mut sess, tok, &perm_sizes, &perm_poses, 0.4)
                .unwrap();
            (
                sess.tape.value(v.rot).clone(),
                sess.tape.value(v.trans).clone(),
            )
        };

        let (rot_a, trans_a) = run(&[0, 1, 2]);
        let (rot_b, trans_b) = run(&[2, 0, 1]);
        // Row i of the permuted run corresponds to fragment order[i].
        let order = [2usize, 0, 1];
        for (bi, &ai) in order.iter().enumerate() {
            for c in 0..3 {
                assert!((rot_b[(bi, c)] - rot_a[(ai, c)]).abs() < 1e-5);
                assert!((trans_b[(bi, c)] - trans_a[(ai, c)]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn token_order_within_fragment_does_not_change_velocities() {
        let cfg = tiny_cfg();
        let (store, branch) = build(7, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tokens = Array2::from_shape_fn((9, 8), |_| rng.gen_range(-1.0..1.0));
        let poses = random_poses(&mut rng, 2);
        let sizes = [5usize, 4];

        let mut shuffled = tokens.clone();
        // Reverse fragment 0's five rows in place.
        for r in 0..5 {
            for c in 0..8 {
                shuffled[(r, c)] = tokens[(4 - r, c)];
            }
        }
        let run = |tk: &Array2<f64>| -> Array2<f64> {
            let mut sess = Session::new(&store);
            let tok = sess.tape.constant(tk.clone());
            let (v, _) = branch.forward(&mut sess, tok, &sizes, &poses, 0.2).unwrap();
            let rot = sess.tape.value(v.rot).clone();
            let trans = sess.tape.value(v.trans).clone();
            ndarray::concatenate(ndarray::Axis(1), &[rot.view(), trans.view()]).unwrap()
        };
        let a = run(&tokens);
        let b = run(&shuffled);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let (store, branch) = build(11, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tokens = Array2::from_shape_fn((7, 8), |_| rng.gen_range(-1.0..1.0));
        let poses = random_poses(&mut rng, 2);
        let run = || {
            let mut sess = Session::new(&store);
            let tok = sess.tape.constant(tokens.clone());
            let (v, _) = branch.forward(&mut sess, tok, &[3, 4], &poses, 0.6).unwrap();
            (
                sess.tape.value(v.rot).clone(),
                sess.tape.value(v.trans).clone(),
            )
        };
        let (r1, t1) = run();
        let (r2, t2) = run();
        assert_eq!(r1, r2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn loss_is_zero_at_targets_and_counts_unit_offsets() {
        let (store, _) = build(13, &tiny_cfg());
        let mut sess = Session::new(&store);
        let targets = vec![
            FlowTarget {
                rot_vel: Vector3::new(0.1, -0.2, 0.3),
                trans_vel: Vector3::new(0.5, 0.0, -0.1),
            },
            FlowTarget {
                rot_vel: Vector3::new(-0.4, 0.2, 0.0),
                trans_vel: Vector3::new(0.0, 0.3, 0.7),
            },
        ];
        let mut exact = Array2::zeros((2, 3));
        let mut exact_t = Array2::zeros((2, 3));
        for (i, ft) in targets.iter().enumerate() {
            for c in 0..3 {
                exact[(i, c)] = ft.rot_vel[c];
                exact_t[(i, c)] = ft.trans_vel[c];
            }
        }
        let pr = sess.tape.constant(exact.clone());
        let pt = sess.tape.constant(exact_t.clone());
        let zero = assembly_loss(
            &mut sess,
            &VelocityNodes { rot: pr, trans: pt },
            &targets,
        )
        .unwrap();
        assert_eq!(sess.tape.scalar_value(zero), 0.0);

        // +1 on every coordinate of fragment 0's rotation velocity: the sum
        // reduction adds exactly 3.
        let mut off = exact.clone();
        for c in 0..3 {
            off[(0, c)] += 1.0;
        }
        let pr2 = sess.tape.constant(off);
        let pt2 = sess.tape.constant(exact_t);
        let bumped = assembly_loss(
            &mut sess,
            &VelocityNodes { rot: pr2, trans: pt2 },
            &targets,
        )
        .unwrap();
        approx::assert_abs_diff_eq!(sess.tape.scalar_value(bumped), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn loss_matches_brute_force_and_splits_by_component() {
        let (store, _) = build(17, &tiny_cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let targets: Vec<FlowTarget<f64>> = (0..2)
            .map(|_| FlowTarget {
                rot_vel: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                trans_vel: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            })
            .collect();
        let pred_r = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let pred_t = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));

        let mut brute = 0.0;
        let mut brute_rot = 0.0;
        for i in 0..2 {
            for c in 0..3 {
                let dr: f64 = pred_r[(i, c)] - targets[i].rot_vel[c];
                let dt: f64 = pred_t[(i, c)] - targets[i].trans_vel[c];
                brute += dr * dr + dt * dt;
                brute_rot += dr * dr;
            }
        }
        let mut sess = Session::new(&store);
        let pr = sess.tape.constant(pred_r.clone());
        let pt = sess.tape.constant(pred_t.clone());
        let loss = assembly_loss(
            &mut sess,
            &VelocityNodes { rot: pr, trans: pt },
            &targets,
        )
        .unwrap();
        approx::assert_abs_diff_eq!(sess.tape.scalar_value(loss), brute, epsilon = 1e-12);

        // Rotation-only part: zero the translation targets AND predictions.
        let zeroed: Vec<FlowTarget<f64>> = targets
            .iter()
            .map(|ft| FlowTarget { rot_vel: ft.rot_vel, trans_vel: Vector3::zeros() })
            .collect();
        let pz = sess.tape.constant(Array2::zeros((2, 3)));
        let rot_only = assembly_loss(
            &mut sess,
            &VelocityNodes { rot: pr, trans: pz },
            &zeroed,
        )
        .unwrap();
        approx::assert_abs_diff_eq!(
            sess.tape.scalar_value(rot_only),
            brute_rot,
            epsilon = 1e-12
        );
    }

    #[test]
    fn empty_and_mismatched_inputs_error() {
        let cfg = tiny_cfg();
        let (store, branch) = build(19, &cfg);
        let mut sess = Session::new(&store);
        let tok = sess.tape.constant(Array2::<f64>::zeros((4, 8)));
        assert!(matches!(
            branch.forward(&mut sess, tok, &[], &[], 0.1),
            Err(AssemblyError::EmptyInput(_))
        ));
        let pose = vec![PoseState::<f64>::identity()];
        assert!(matches!(
            branch.forward(&mut sess, tok, &[5], &pose, 0.1),
            Err(AssemblyError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn anchor_gauge_centers_translations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let poses = random_poses(&mut rng, 5);
        let centered = anchor_gauge(&poses);
        let mut c = Vector3::zeros();
        for p in &centered {
            c += p.trans;
        }
        assert!(c.norm() < 1e-9);
        // Rotations untouched; already-centered input is unchanged.
        for (a, b) in poses.iter().zip(centered.iter()) {
            assert_eq!(a.rot.matrix(), b.rot.matrix());
        }
        let again = anchor_gauge(&centered);
        for (a, b) in centered.iter().zip(again.iter()) {
            assert!((a.trans - b.trans).norm() < 1e-12);
        }

        let shifted: Vec<_> = centered
            .iter()
            .map(|p| PoseState::new(p.rot.clone(), p.trans + Vector3::new(1.0, 1.0, 1.0)))
            .collect();
        let unshifted = anchor_gauge(&shifted);
        for (a, b) in centered.iter().zip(unshifted.iter()) {
            assert!((a.trans - b.trans).norm() < 1e-12);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = AssemblyConfig { depth: 1, ..tiny_cfg() };
        let (mut store, branch) = build(23, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tokens = Array2::from_shape_fn((6, 8), |_| rng.gen_range(-1.0..1.0));
        let poses = random_poses(&mut rng, 2);
        let targets: Vec<FlowTarget<f64>> = (0..2)
            .map(|_| FlowTarget {
                rot_vel: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                trans_vel: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            })
            .collect();

        let loss_fn = |st: &ParamStore<f64>| {
            let mut sess = Session::new(st);
            let tok = sess.tape.constant(tokens.clone());
            let (v, _) = branch.forward(&mut sess, tok, &[2, 4], &poses, 0.35).unwrap();
            let loss = assembly_loss(&mut sess, &v, &targets).unwrap();
            (sess.tape.scalar_value(loss), sess.grads(loss))
        };
        let mut slot_rng = ChaCha8Rng::seed_from_u64(8);
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
