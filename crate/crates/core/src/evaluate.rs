//! Checkpoint evaluation: run the sampler over a dataset split and score
//! pose metrics plus shape chamfer under the two part-status protocols.
//!
//! `Complete` scores every fragment and compares the predicted assembly to
//! the ground-truth assembly. `Missing` withholds fragments before
//! sampling; pose metrics cover the observed fragments, while the chamfer
//! term compares the decoded generated shape against the full ground-truth
//! surface — the assembled observed parts cannot cover the withheld
//! regions, so shape quality there is attributable to generation.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{drop_exact, AssemblySample, DatasetError};
use crate::metrics::{
    aggregate, assembly_chamfer, chamfer, pose_metrics, MetricsError, MetricsReport, SampleRecord,
};
use crate::model::JointModel;
use crate::sampler::{decode_sampled_mesh, sample_assembly, SampleOptions, SamplerError};
use crate::scalar::Scalar;
use crate::store::ParamStore;

/// Part-status evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// All fragments observed.
    Complete,
    /// Some fragments withheld before sampling.
    Missing,
}

impl Protocol {
    /// Lowercase protocol name used in reports.
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Complete => "complete",
            Protocol::Missing => "missing",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "complete" => Ok(Protocol::Complete),
            "missing" => Ok(Protocol::Missing),
            other => Err(format!("unknown protocol {other:?} (complete|missing)")),
        }
    }
}

/// Errors surfaced while evaluating.
#[derive(Debug, Error)]
pub enum EvalError {
    /// Sampler failure.
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    /// Metric failure.
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    /// Dataset failure.
    #[error(transparent)]
    Data(#[from] DatasetError),
}

/// Evaluation settings.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Euler steps per sample.
    pub steps: usize,
    /// Classifier-free guidance scale.
    pub guidance: f64,
    /// Base seed; each sample derives its own stream from it.
    pub seed: u64,
    /// Condition on the silhouette; `false` evaluates assembly-only mode.
    pub conditioned: bool,
    /// Fragment-point budget per sample.
    pub fragment_budget: usize,
    /// Marching-cubes resolution for the missing-protocol shape decode.
    pub mesh_resolution: usize,
    /// Parts withheld under the missing protocol: `ceil(fraction * n)`
    /// when set, exactly one part otherwise.
    pub drop_fraction: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            steps: 50,
            guidance: 3.0,
            seed: 0,
            conditioned: true,
            fragment_budget: 1024,
            mesh_resolution: 48,
            drop_fraction: None,
        }
    }
}

/// Seed for the sample at `index`: a golden-ratio stride spreads consecutive
/// indices across the seed space. Exposed so callers can reproduce a single
/// sample from a report.
pub fn per_sample_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Evaluate one sample; `Ok(None)` means the sample cannot be scored under
/// the protocol (too few parts to withhold one) and was skipped.
pub fn evaluate_sample<S: Scalar>(
    model: &JointModel,
    store: &ParamStore<S>,
    sample: &AssemblySample,
    index: usize,
    protocol: Protocol,
    opts: &EvalOptions,
) -> Result<Option<SampleRecord>, EvalError> {
    let mut sample = sample.clone();
    if protocol == Protocol::Missing {
        let mut rng = ChaCha8Rng::seed_from_u64(per_sample_seed(opts.seed, index));
        rng.set_stream(1); // reserve stream 0 for the sampler noise
        let n = sample.num_parts();
        let to_drop = match opts.drop_fraction {
            Some(f) => (f * n as f64).ceil() as usize,
            None => 1,
        };
        if drop_exact(&mut sample, to_drop, &mut rng).is_err() {
            return Ok(None); // would leave fewer than two observed parts
        }
    }

    let out = sample_assembly(
        model,
        store,
        &sample,
        &SampleOptions {
            steps: opts.steps,
            guidance: opts.guidance,
            seed: per_sample_seed(opts.seed, index),
            conditioned: opts.conditioned,
            fragment_budget: opts.fragment_budget,
            latent_steps: None,
        },
    )?;

    // Pose metrics over the observed fragments, on the budgeted point sets.
    let alloc = sample.budget_allocation(opts.fragment_budget);
    let parts: Vec<Array2<f64>> = out
        .observed
        .iter()
        .map(|&i| sample.budgeted_points(i, alloc[i]))
        .collect();
    let pred: Vec<_> = out
        .poses
        .iter()
        .map(|p| crate::manifold::PoseState::<f64>::new(
            crate::manifold::Rotation::from_matrix_unchecked(p.rot.matrix().map(|x| x.widen())),
            p.trans.map(|x| x.widen()),
        ))
        .collect();
    let gt: Vec<_> = out.observed.iter().map(|&i| sample.gt_poses[i]).collect();
    let pose = pose_metrics(&pred, &gt, &parts)?;

    let cd = match protocol {
        Protocol::Complete => assembly_chamfer(&pred, &gt, &parts)?,
        Protocol::Missing => {
            // Decoded generated shape against the full ground-truth surface.
            // A latent whose decoded field never crosses zero has no surface
            // to score; count it as a skip rather than aborting the split.
            let mesh = match decode_sampled_mesh(model, store, &out.latent, opts.mesh_resolution) {
                Ok(mesh) => mesh,
                Err(SamplerError::Vae(crate::vae::VaeError::EmptySurface)) => return Ok(None),
                Err(e) => return Err(e.into()),
            };
            let mut verts = Array2::zeros((mesh.vertices.len(), 3));
            for (r, v) in mesh.vertices.iter().enumerate() {
                verts[[r, 0]] = v.x.widen();
                verts[[r, 1]] = v.y.widen();
                verts[[r, 2]] = v.z.widen();
            }
            chamfer(&verts, &sample.whole_points)
        }
    };

    Ok(Some(SampleRecord {
        index,
        category: sample.category.clone(),
        protocol: protocol.name().to_string(),
        parts: out.observed.len(),
        pose,
        chamfer: cd,
    }))
}

/// Evaluate a dataset split and pool the per-sample records.
pub fn evaluate<S: Scalar>(
    model: &JointModel,
    store: &ParamStore<S>,
    samples: &[AssemblySample],
    protocol: Protocol,
    opts: &EvalOptions,
) -> Result<(Vec<SampleRecord>, MetricsReport), EvalError> {
    let mut records = Vec::with_capacity(samples.len());
    let mut skipped = 0usize;
    for (index, sample) in samples.iter().enumerate() {
        match evaluate_sample(model, store, sample, index, protocol, opts)? {
            Some(record) => records.push(record),
            None => skipped += 1,
        }
    }
    let report = aggregate(&records, skipped);
    Ok((records, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::BridgeOrder;
    use crate::assembly::AssemblyConfig;
    use crate::dataset::{generate_sample, DataConfig, ShapeKind};
    use crate::generation::GenerationConfig;
    use crate::model::ModelConfig;
    use crate::vae::{FourierEmbedder, VaeConfig};

    fn tiny_model(seed: u64) -> (ParamStore<f64>, JointModel) {
        let cfg = ModelConfig {
            vae: VaeConfig {
                width: 16,
                heads: 2,
                encoder_depth: 1,
                decoder_depth: 1,
                whole_tokens: 4,
                kl_weight: 1e-4,
                embedder: FourierEmbedder { num_frequencies: 2, base_scale: 1.0 },
            },
            assembly: AssemblyConfig {
                width: 16,
                heads: 2,
                depth: 2,
                token_width: 16,
                time_frequencies: 2,
            },
            generation: GenerationConfig {
                width: 16,
                heads: 2,
                depth: 2,
                token_width: 16,
                time_frequencies: 2,
                image_size: 16,
            },
            bridge_order: BridgeOrder::Sequential,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = JointModel::new(&mut store, &mut rng, &cfg);
        (store, model)
    }

    fn tiny_samples(n: usize, parts: usize) -> Vec<AssemblySample> {
        let cfg = DataConfig {
            whole_points: 128,
            whole_queries: 32,
            sdf_near: 16,
            sdf_uniform: 8,
            parts_min: parts,
            parts_max: parts,
            image_size: 16,
            kinds: vec![ShapeKind::Box],
            ..DataConfig::default()
        };
        (0..n).map(|i| generate_sample(&cfg, 31, i as u64).unwrap()).collect()
    }

    #[test]
    fn complete_protocol_emits_one_record_per_sample() {
        let (store, model) = tiny_model(3);
        let samples = tiny_samples(2, 2);
        let opts = EvalOptions {
            steps: 2,
            fragment_budget: 64,
            mesh_resolution: 16,
            ..EvalOptions::default()
        };
        let (records, report) =
            evaluate(&model, &store, &samples, Protocol::Complete, &opts).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(report.samples, 2);
        assert_eq!(report.skipped, 0);
        assert!(report.rotation_rmse_deg.is_finite());
        assert!(report.chamfer_mean.is_finite());
        for r in &records {
            assert_eq!(r.protocol, "complete");
            assert_eq!(r.parts, 2);
        }
    }

    #[test]
    fn missing_protocol_skips_two_part_samples() {
        // Withholding one of two parts would leave a single observed part,
        // below the minimum of two, so two-part samples are skipped.
        let (store, model) = tiny_model(5);
        let samples = tiny_samples(2, 2);
        let opts = EvalOptions {
            steps: 2,
            fragment_budget: 64,
            mesh_resolution: 16,
            ..EvalOptions::default()
        };
        let (records, report) =
            evaluate(&model, &store, &samples, Protocol::Missing, &opts).unwrap();
        assert!(records.is_empty());
        assert_eq!(report.skipped, 2);
    }

    #[test]
    fn missing_protocol_scores_observed_parts_only() {
        let (store, model) = tiny_model(7);
        let samples = tiny_samples(1, 3);
        let opts = EvalOptions {
            steps: 2,
            fragment_budget: 96,
            mesh_resolution: 16,
            ..EvalOptions::default()
        };
        let (records, _) = evaluate(&model, &store, &samples, Protocol::Missing, &opts).unwrap();
        // Possible that the untrained decoder yields an empty surface; the
        // sample is then an error, not a skip — so require success here.
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].parts, 2, "one of three parts withheld");
        assert_eq!(records[0].protocol, "missing");
    }
}
