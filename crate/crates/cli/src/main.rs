//! `refrag` — dataset generation, two-stage training, joint sampling,
//! evaluation, and mesh export for fragment reassembly with shape
//! generation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use refrag_core::config::{Precision, TrainConfig};
use refrag_core::dataset::{
    generate_sample, write_archive, AssemblySample, DataConfig, Family, ShapeKind,
};
use refrag_core::evaluate::{evaluate, EvalOptions, Protocol};
use refrag_core::mesh::{write_obj, write_ply};
use refrag_core::metrics::write_report;
use refrag_core::model::{
    load_checkpoint, model_from_checkpoint, save_checkpoint, Checkpoint, JointModel,
};
use refrag_core::sampler::{decode_sampled_mesh, sample_assembly, SampleOptions};
use refrag_core::scalar::Scalar;
use refrag_core::store::ParamStore;
use refrag_core::train::{
    read_all_samples, train_stage1, train_stage2, StepRecord, Trainer,
};

#[derive(Parser)]
#[command(
    name = "refrag",
    about = "Joint fragment reassembly and whole-shape generation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset archive.
    GenData(GenDataArgs),
    /// Train stage 1 (assembly warm-up) or stage 2 (joint).
    Train(TrainArgs),
    /// Sample poses and a shape for one dataset sample.
    Sample(SampleArgs),
    /// Evaluate a checkpoint over a dataset split.
    Eval(EvalArgs),
    /// Decode a mesh from a checkpoint for qualitative figures.
    ExportMesh(ExportMeshArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Sample family: `parts` (semantic part assemblies) or `fracture`
    /// (fractured primitives).
    #[arg(long)]
    family: Family,
    /// Number of samples.
    #[arg(long)]
    n: usize,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output archive path.
    #[arg(long)]
    out: PathBuf,
    /// Shape kinds to draw from (fracture family), comma separated.
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<ShapeKind>>,
    /// Minimum parts per sample.
    #[arg(long)]
    parts_min: Option<usize>,
    /// Maximum parts per sample.
    #[arg(long)]
    parts_max: Option<usize>,
    /// Points sampled on each whole surface.
    #[arg(long)]
    whole_points: Option<usize>,
    /// Stored encoder query points per sample.
    #[arg(long)]
    whole_queries: Option<usize>,
    /// Near-surface SDF queries per sample.
    #[arg(long)]
    sdf_near: Option<usize>,
    /// Uniform-volume SDF queries per sample.
    #[arg(long)]
    sdf_uniform: Option<usize>,
    /// Silhouette resolution in pixels (multiple of 16).
    #[arg(long)]
    image_size: Option<usize>,
    /// Store fragments in canonical coordinates with identity poses
    /// (oracle fixtures).
    #[arg(long, default_value_t = false)]
    identity_poses: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training stage.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// TOML config path.
    #[arg(long)]
    config: PathBuf,
    /// Resume from this checkpoint (its stage must match --stage).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stage-1 checkpoint that seeds stage 2 (default:
    /// `<out_dir>/stage1.ckpt`).
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint path.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset archive holding the input sample.
    #[arg(long)]
    input: PathBuf,
    /// Sample index within the archive.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Euler steps.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Classifier-free guidance scale.
    #[arg(long, default_value_t = 3.0)]
    guidance: f64,
    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Ignore the silhouette and sample with the null condition.
    #[arg(long, default_value_t = false)]
    assemble_only: bool,
    /// Fragment-point budget.
    #[arg(long, default_value_t = 1024)]
    fragment_budget: usize,
    /// Marching-cubes resolution.
    #[arg(long, default_value_t = 64)]
    mesh_resolution: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint path.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset archive to evaluate.
    #[arg(long)]
    data: PathBuf,
    /// Part-status protocol.
    #[arg(long)]
    protocol: Protocol,
    /// Report path (JSONL: per-sample records plus a summary line).
    #[arg(long)]
    out: PathBuf,
    /// Euler steps.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Classifier-free guidance scale.
    #[arg(long, default_value_t = 3.0)]
    guidance: f64,
    /// Base evaluation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate assembly-only mode (null condition).
    #[arg(long, default_value_t = false)]
    assemble_only: bool,
    /// Fragment-point budget.
    #[arg(long, default_value_t = 1024)]
    fragment_budget: usize,
    /// Marching-cubes resolution for the missing-protocol decode.
    #[arg(long, default_value_t = 48)]
    mesh_resolution: usize,
    /// Withhold ceil(fraction * parts) parts under the missing protocol
    /// instead of exactly one.
    #[arg(long)]
    drop_fraction: Option<f64>,
    /// Evaluate only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct ExportMeshArgs {
    /// Checkpoint path.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset archive holding the input sample.
    #[arg(long)]
    input: PathBuf,
    /// Sample index within the archive.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Output mesh path (.obj or .ply).
    #[arg(long)]
    out: PathBuf,
    /// Marching-cubes resolution.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Decode the autoencoder reconstruction of the ground-truth whole
    /// shape instead of running the sampler.
    #[arg(long, default_value_t = false)]
    reconstruct: bool,
    /// Euler steps (sampling mode).
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Guidance scale (sampling mode).
    #[arg(long, default_value_t = 3.0)]
    guidance: f64,
    /// Noise seed (sampling mode).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Sample(args) => sample(args),
        Command::Eval(args) => eval(args),
        Command::ExportMesh(args) => export_mesh(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = DataConfig { family: args.family, ..DataConfig::default() };
    if let Some(kinds) = args.kinds {
        cfg.kinds = kinds;
    }
    if let Some(v) = args.parts_min {
        cfg.parts_min = v;
    }
    if let Some(v) = args.parts_max {
        cfg.parts_max = v;
    }
    if let Some(v) = args.whole_points {
        cfg.whole_points = v;
    }
    if let Some(v) = args.whole_queries {
        cfg.whole_queries = v;
    }
    if let Some(v) = args.sdf_near {
        cfg.sdf_near = v;
    }
    if let Some(v) = args.sdf_uniform {
        cfg.sdf_uniform = v;
    }
    if let Some(v) = args.image_size {
        cfg.image_size = v;
    }
    cfg.identity_poses = args.identity_poses;
    cfg.validate().map_err(|e| anyhow::anyhow!("{e}"))?;

    let mut samples = Vec::with_capacity(args.n);
    for i in 0..args.n {
        let sample = generate_sample(&cfg, args.seed, i as u64)
            .with_context(|| format!("generating sample {i}"))?;
        samples.push(sample);
        if (i + 1) % 100 == 0 {
            eprintln!("generated {}/{}", i + 1, args.n);
        }
    }
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_archive(&args.out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = TrainConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(args, cfg),
        Precision::F64 => train_typed::<f64>(args, cfg),
    }
}

fn train_typed<S: Scalar>(args: TrainArgs, cfg: TrainConfig) -> Result<()> {
    let data = read_all_samples(&cfg.data_path)
        .with_context(|| format!("reading {}", cfg.data_path.display()))?;
    eprintln!(
        "stage {} | {} samples | precision {} | out {}",
        args.stage,
        data.len(),
        cfg.precision,
        cfg.out_dir.display()
    );
    std::fs::create_dir_all(&cfg.out_dir)?;
    let metrics_path = cfg.out_dir.join(format!("stage{}_metrics.jsonl", args.stage));
    let mut metrics = BufWriter::new(
        File::options().create(true).append(true).open(&metrics_path)?,
    );
    let log_every = cfg.log_every;
    let total = match args.stage {
        1 => cfg.stage1_steps,
        _ => cfg.stage2_steps,
    };
    let mut on_record = |r: &StepRecord| {
        if r.step % log_every == 0 || r.step + 1 == total {
            let line = serde_json::to_string(r).expect("record serializes");
            let _ = writeln!(metrics, "{line}");
            let _ = metrics.flush();
            eprintln!(
                "stage {} step {:>6} loss {:.6} (asm {:.6} recon {:.6} gen {:.6}) lr {:.2e} drop {:.2}",
                r.stage, r.step, r.loss, r.loss_assembly, r.loss_recon, r.loss_generation,
                r.lr, r.drop_rate
            );
        }
    };

    let final_ckpt: Checkpoint<S> = if let Some(resume) = &args.resume {
        let ckpt = load_checkpoint::<S>(resume)
            .with_context(|| format!("loading {}", resume.display()))?;
        if ckpt.stage != args.stage {
            bail!(
                "--resume checkpoint is stage {}, but --stage {} was requested",
                ckpt.stage,
                args.stage
            );
        }
        let mut trainer = Trainer::from_checkpoint(cfg.clone(), data, ckpt)?;
        trainer.run(&mut on_record)?
    } else {
        match args.stage {
            1 => train_stage1::<S>(&cfg, data, &mut on_record)?,
            2 => {
                let init = args
                    .init
                    .unwrap_or_else(|| cfg.out_dir.join("stage1.ckpt"));
                let stage1 = load_checkpoint::<S>(&init)
                    .with_context(|| format!("loading {}", init.display()))?;
                train_stage2::<S>(&cfg, stage1, data, &mut on_record)?
            }
            other => bail!("unknown stage {other}"),
        }
    };
    let out = cfg.out_dir.join(format!("stage{}.ckpt", args.stage));
    save_checkpoint(&out, &final_ckpt)?;
    println!(
        "stage {} finished at step {}; checkpoint {}",
        final_ckpt.stage,
        final_ckpt.step,
        out.display()
    );
    println!("metrics at {}", metrics_path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(JointModel, ParamStore<f64>, Checkpoint<f64>)> {
    let ckpt = load_checkpoint::<f64>(path)
        .with_context(|| format!("loading {}", path.display()))?;
    let (model, store) = model_from_checkpoint(&ckpt)?;
    Ok((model, store, ckpt))
}

fn sample(args: SampleArgs) -> Result<()> {
    let (model, store, ckpt) = load_model(&args.ckpt)?;
    let mut samples = read_all_samples_checked(&args.input, args.index)?;
    let input = samples.swap_remove(args.index);

    let opts = SampleOptions {
        steps: args.steps,
        guidance: args.guidance,
        seed: args.seed,
        conditioned: !args.assemble_only,
        fragment_budget: args.fragment_budget,
        latent_steps: None,
    };
    let out = sample_assembly(&model, &store, &input, &opts)?;
    std::fs::create_dir_all(&args.out)?;

    // Pose table: fragment id, unit quaternion, translation.
    let pose_path = args.out.join("poses.txt");
    {
        let mut w = BufWriter::new(File::create(&pose_path)?);
        writeln!(w, "# fragment qw qx qy qz tx ty tz")?;
        for (pose, &frag) in out.poses.iter().zip(&out.observed) {
            let q = pose.rot.to_quaternion();
            let t = pose.trans;
            writeln!(
                w,
                "{frag} {:.17} {:.17} {:.17} {:.17} {:.17} {:.17} {:.17}",
                q[0], q[1], q[2], q[3], t.x, t.y, t.z
            )?;
        }
    }

    // Decoded shape in both mesh formats.
    let mesh = decode_sampled_mesh(&model, &store, &out.latent, args.mesh_resolution)?;
    let obj_path = args.out.join("shape.obj");
    write_obj(&mesh, &mut BufWriter::new(File::create(&obj_path)?))?;
    let ply_path = args.out.join("shape.ply");
    write_ply(&mesh, &mut BufWriter::new(File::create(&ply_path)?))?;

    // Provenance manifest.
    let manifest = serde_json::json!({
        "tool": {"name": "refrag", "version": env!("CARGO_PKG_VERSION")},
        "checkpoint": {
            "path": args.ckpt.display().to_string(),
            "stage": ckpt.stage,
            "step": ckpt.step,
            "master_seed": ckpt.master_seed,
        },
        "input": {
            "archive": args.input.display().to_string(),
            "index": args.index,
            "category": input.category,
            "parts": input.num_parts(),
            "observed": out.observed,
        },
        "options": {
            "steps": args.steps,
            "guidance": args.guidance,
            "seed": args.seed,
            "conditioned": !args.assemble_only,
            "fragment_budget": args.fragment_budget,
            "mesh_resolution": args.mesh_resolution,
        },
        "outputs": {
            "poses": pose_path.display().to_string(),
            "mesh_obj": obj_path.display().to_string(),
            "mesh_ply": ply_path.display().to_string(),
            "mesh_vertices": mesh.vertices.len(),
            "mesh_triangles": mesh.triangles.len(),
        },
    });
    let manifest_path = args.out.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn read_all_samples_checked(path: &Path, index: usize) -> Result<Vec<AssemblySample>> {
    let samples = read_all_samples(path)
        .with_context(|| format!("reading {}", path.display()))?;
    if index >= samples.len() {
        bail!("index {index} out of range: archive holds {} samples", samples.len());
    }
    Ok(samples)
}

fn eval(args: EvalArgs) -> Result<()> {
    let (model, store, _) = load_model(&args.ckpt)?;
    let mut samples = read_all_samples(&args.data)
        .with_context(|| format!("reading {}", args.data.display()))?;
    if let Some(limit) = args.limit {
        samples.truncate(limit);
    }
    let opts = EvalOptions {
        steps: args.steps,
        guidance: args.guidance,
        seed: args.seed,
        conditioned: !args.assemble_only,
        fragment_budget: args.fragment_budget,
        mesh_resolution: args.mesh_resolution,
        drop_fraction: args.drop_fraction,
    };
    let (records, report) = evaluate(&model, &store, &samples, args.protocol, &opts)?;
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_report(&args.out, &records, &report)?;
    println!(
        "{} protocol | {} scored, {} skipped",
        args.protocol.name(),
        report.samples,
        report.skipped
    );
    println!(
        "RE {:.4} deg | TE(x100) {:.4} | PA {:.2}% | CD(x1000) {:.4}",
        report.rotation_rmse_deg,
        report.translation_rmse_x100,
        report.part_accuracy,
        report.chamfer_x1000
    );
    println!("report at {}", args.out.display());
    Ok(())
}

fn export_mesh(args: ExportMeshArgs) -> Result<()> {
    let (model, store, _) = load_model(&args.ckpt)?;
    let mut samples = read_all_samples_checked(&args.input, args.index)?;
    let input = samples.swap_remove(args.index);

    let mesh = if args.reconstruct {
        // Autoencoder round trip of the ground-truth whole surface.
        let idx = refrag_core::vae::strided_indices(
            input.whole_queries.nrows(),
            model.cfg.vae.whole_tokens,
        );
        let queries = refrag_core::vae::gather_rows(&input.whole_queries, &idx);
        let mut sess = refrag_core::autograd::Session::new(&store);
        let stats = model.vae.encode(&mut sess, &input.whole_points, &queries)?;
        let mu = sess.tape.value(stats.mu).clone();
        let z_tilde = model.vae.decode_latents_value(&store, &mu);
        model.vae.mesh_from_sdf(&store, &z_tilde, args.resolution)?
    } else {
        let opts = SampleOptions {
            steps: args.steps,
            guidance: args.guidance,
            seed: args.seed,
            conditioned: true,
            fragment_budget: 1024,
            latent_steps: None,
        };
        let out = sample_assembly(&model, &store, &input, &opts)?;
        decode_sampled_mesh(&model, &store, &out.latent, args.resolution)?
    };

    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(&args.out)?);
    match args.out.extension().and_then(|e| e.to_str()) {
        Some("ply") => write_ply(&mesh, &mut w)?,
        _ => write_obj(&mesh, &mut w)?,
    }
    println!(
        "wrote {} ({} vertices, {} triangles)",
        args.out.display(),
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    Ok(())
}
