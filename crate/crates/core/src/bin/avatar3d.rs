//! Batch command line for data generation, training, generation,
//! reconstruction, try-on, reposing, evaluation and self-checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use avatar3d::body::make_default_body;
use avatar3d::diffusion::GuidanceConfig;
use avatar3d::lifting::mc::SphereSdf;
use avatar3d::lifting::{marching_cubes, GridConfig, LiftTrainConfig, PointCounts};
use avatar3d::mesh::{read_obj, write_obj, Vec3};
use avatar3d::metrics::{avg_pairwise_similarity, evaluate_meshes, max_similarity, EvalConfig};
use avatar3d::neural::gradcheck::{core_suite, GradCheck};
use avatar3d::pipeline::models::{lifting_subjects, save_denoiser, save_lifting, BACK_FILE, FRONT_FILE, LIFT_FILE, LIFT_RGB_FILE};
use avatar3d::pipeline::{
    exit_code, job_seed, make_synthetic_dataset, run_jobs, train_generator, train_lift, Dataset, GenerationOutput,
    GeneratorTraining, Models, Pipeline, PipelineConfig, QualityPreset, RequestFile, Split, View,
};
use avatar3d::raster::load_png;
use avatar3d::rigging::{AnchorMode, AnchoredScan, PoseSequence};
use avatar3d::{container, Error, Result};

#[derive(Parser)]
#[command(name = "avatar3d", version, about = "Text- and body-conditioned 3D avatar generation at desk scale")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration JSON; defaults apply to absent fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Standard)]
    preset: PresetArg,
    /// Override the preset's DDIM step count.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Override the preset's marching-cubes resolution.
    #[arg(long, global = true)]
    mc_res: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true)]
    guidance_text: Option<f64>,
    #[arg(long, global = true)]
    guidance_image: Option<f64>,
    /// Concurrent requests; capped by APTC_THREADS.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[arg(long, global = true, value_enum)]
    anchor: Option<AnchorArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Standard,
    High,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnchorArg {
    Surface,
    WeightTransfer,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full cascade for one or more request JSON files.
    Generate {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        requests: Vec<PathBuf>,
    },
    /// Surface from a single front image.
    Reconstruct {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the masked region of a front image and regenerate the rest.
    Tryon {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        source: PathBuf,
        /// PNG whose bright pixels mark the region to keep.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Animate an anchored scan with a pose sequence JSON.
    Repose {
        #[arg(long)]
        rig: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the front-view generator.
    TrainFront(GenTrainArgs),
    /// Train the back-view generator.
    TrainBack(GenTrainArgs),
    /// Train a lifting net.
    TrainLift {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models: PathBuf,
        /// Train the image-only variant used by `reconstruct`.
        #[arg(long)]
        no_control: bool,
        #[arg(long, default_value_t = 400)]
        iters: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Surface and near-surface pool size per subject.
        #[arg(long, default_value_t = 4096)]
        pool: usize,
    },
    /// Render a synthetic dataset.
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        subjects: usize,
    },
    /// Score a predicted mesh against a reference, or aggregate embeddings.
    Eval {
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 128)]
        iou_res: usize,
        #[arg(long)]
        icp_scale: bool,
        /// JSON list of embedding vectors for the pairwise-similarity score.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// JSON list of reference embeddings for the max-similarity score.
        #[arg(long, requires = "embeddings")]
        reference: Option<PathBuf>,
    },
    /// Finite-difference checks of every differentiable op and loss.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time marching cubes of an analytic sphere.
    BenchMc {
        #[arg(long, default_value_t = 512)]
        res: usize,
        #[arg(long, default_value_t = 32)]
        chunk: usize,
    },
}

#[derive(Args)]
struct GenTrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    models: PathBuf,
    #[arg(long, default_value_t = 300)]
    pretrain_iters: usize,
    #[arg(long, default_value_t = 300)]
    finetune_iters: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
}

/// Flagged outputs map to exit code 3.
struct Flagged(String);

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = avatar3d::pipeline::thread_cap() {
        // Only fails if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(Flagged(msg))) => {
            eprintln!("flagged: {msg}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::from_json_file(p)?,
        None => PipelineConfig::default(),
    };
    if g.guidance_text.is_some() || g.guidance_image.is_some() {
        cfg.guidance = GuidanceConfig::new(
            g.guidance_text.unwrap_or(cfg.guidance.s_text),
            g.guidance_image.unwrap_or(cfg.guidance.s_image),
        )
        .map_err(|e| Error::Config(e.to_string()))?;
    }
    if let Some(a) = g.anchor {
        cfg.anchor = match a {
            AnchorArg::Surface => AnchorMode::Surface,
            AnchorArg::WeightTransfer => AnchorMode::WeightTransfer,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn preset(g: &Global) -> Result<QualityPreset> {
    let base = match g.preset {
        PresetArg::Standard => QualityPreset::STANDARD,
        PresetArg::High => QualityPreset::HIGH,
    };
    if g.steps.is_none() && g.mc_res.is_none() {
        return Ok(base);
    }
    QualityPreset::custom(g.steps.unwrap_or(base.ddim_steps), g.mc_res.unwrap_or(base.mc_resolution))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn emit(out: &GenerationOutput, dir: &Path, seed: u64, prompt: Option<&str>, p: QualityPreset) -> Result<Option<Flagged>> {
    let report = out.report(seed, prompt, p);
    out.write(dir, &report)?;
    println!("{}", dir.display());
    Ok(out.flagged.clone().map(Flagged))
}

fn run(cli: Cli) -> Result<Option<Flagged>> {
    let g = &cli.global;
    match cli.cmd {
        Cmd::Generate { models, out, requests } => {
            let cfg = config(g)?;
            let preset = preset(g)?;
            let models = Models::load(&models)?;
            let pipe = Pipeline::new(&cfg, &models)?;
            let reqs = requests
                .iter()
                .enumerate()
                .map(|(i, path)| {
                    let file: RequestFile = read_json(path)?;
                    let seed = file.seed.unwrap_or_else(|| job_seed(g.seed, i));
                    file.into_request(&pipe.body, seed, preset)
                })
                .collect::<Result<Vec<_>>>()?;
            let results = run_jobs(&reqs, g.jobs, |_, r| pipe.cascade_generate(r))?;
            let mut flagged = None;
            for (i, (req, res)) in reqs.iter().zip(results).enumerate() {
                let f = emit(&res?, &out.join(format!("req_{i:03}")), req.seed, req.prompt.as_deref(), preset)?;
                flagged = flagged.or(f);
            }
            Ok(flagged)
        }
        Cmd::Reconstruct {
            models,
            image,
            prompt,
            out,
        } => {
            let cfg = config(g)?;
            let preset = preset(g)?;
            let models = Models::load(&models)?;
            let pipe = Pipeline::new(&cfg, &models)?;
            let front = load_png(&image)?;
            let res = pipe.reconstruct(&front, prompt.as_deref(), preset, g.seed)?;
            emit(&res, &out, g.seed, prompt.as_deref(), preset)
        }
        Cmd::Tryon {
            models,
            source,
            mask,
            request,
            out,
        } => {
            let cfg = config(g)?;
            let preset = preset(g)?;
            let models = Models::load(&models)?;
            let pipe = Pipeline::new(&cfg, &models)?;
            let source = load_png(&source)?;
            let mask_img = load_png(&mask)?;
            if (mask_img.height, mask_img.width) != (source.height, source.width) {
                return Err(Error::Param("mask and source image sizes differ".into()));
            }
            let keep: Vec<bool> = mask_img
                .data
                .chunks_exact(mask_img.channels)
                .zip(&mask_img.mask)
                .map(|(px, &m)| m && px[0] >= 0.5)
                .collect();
            let file: RequestFile = read_json(&request)?;
            let seed = file.seed.unwrap_or(g.seed);
            let req = file.into_request(&pipe.body, seed, preset)?;
            let res = pipe.tryon_edit(&source, &keep, &req)?;
            emit(&res, &out, seed, req.prompt.as_deref(), preset)
        }
        Cmd::Repose { rig, poses, out } => {
            let cfg = config(g)?;
            let body = make_default_body(cfg.body_ring, cfg.num_betas)?;
            let scan = AnchoredScan::from_tensors(&container::load(&rig)?, "")?;
            let seq: PoseSequence = read_json(&poses)?;
            let shape = avatar3d::body::ShapeParams::zero(body.num_betas);
            let frames = seq.resolve(&shape)?;
            let meshes = scan.animate(&body, &frames)?;
            std::fs::create_dir_all(&out)?;
            for (i, m) in meshes.iter().enumerate() {
                write_obj(&out.join(format!("frame_{i:04}.obj")), m, scan.colors.as_deref())?;
            }
            println!("{} frames", meshes.len());
            Ok(None)
        }
        Cmd::TrainFront(a) => train_gen(g, a, View::Front),
        Cmd::TrainBack(a) => train_gen(g, a, View::Back),
        Cmd::TrainLift {
            data,
            models,
            no_control,
            iters,
            lr,
            pool,
        } => {
            let cfg = config(g)?;
            let ds = Dataset::open(&data)?;
            let samples = ds.load_split(Split::Train)?;
            let train = LiftTrainConfig {
                steps: iters,
                lr,
                seed: g.seed,
                ..LiftTrainConfig::default()
            };
            let counts = PointCounts {
                surface: pool,
                near: pool,
                uniform: 0,
            };
            let mut spec = cfg.lifting.clone();
            spec.use_control = !no_control;
            let subjects = lifting_subjects(&samples, &spec, ds.cameras()?, counts, train.lo, train.hi, g.seed)?;
            let (net, hist) = train_lift(&subjects, &cfg, !no_control, &train, |i, b| {
                if i % 50 == 0 {
                    eprintln!("step {i}: loss {:.5}", b.total);
                }
            })?;
            let file = if no_control { LIFT_RGB_FILE } else { LIFT_FILE };
            std::fs::create_dir_all(&models)?;
            save_lifting(&models.join(file), &net)?;
            write_json(&models.join(format!("{file}.losses.json")), &hist.iter().map(|b| b.total).collect::<Vec<_>>())?;
            Ok(None)
        }
        Cmd::MakeData { out, subjects } => {
            let cfg = config(g)?;
            let m = make_synthetic_dataset(&out, subjects, g.seed, &cfg)?;
            println!("{} samples in {}", m.samples.len(), out.display());
            Ok(None)
        }
        Cmd::Eval {
            pred,
            gt,
            samples,
            iou_res,
            icp_scale,
            embeddings,
            reference,
        } => {
            let mut report = serde_json::Map::new();
            if let (Some(pred), Some(gt)) = (pred, gt) {
                let cfg = EvalConfig {
                    samples,
                    iou_resolution: iou_res,
                    icp_scale,
                    seed: g.seed,
                    ..EvalConfig::default()
                };
                let r = evaluate_meshes(&read_obj(&pred)?.0, &read_obj(&gt)?.0, &cfg)?;
                report.insert("mesh".into(), serde_json::to_value(r)?);
            }
            if let Some(e) = embeddings {
                let e: Vec<Vec<f64>> = read_json(&e)?;
                report.insert("avg_pairwise_similarity".into(), avg_pairwise_similarity(&e)?.into());
                if let Some(r) = reference {
                    let r: Vec<Vec<f64>> = read_json(&r)?;
                    let best = e.iter().map(|x| max_similarity(x, &r)).collect::<Result<Vec<_>>>()?;
                    report.insert("max_similarity".into(), best.into());
                }
            }
            if report.is_empty() {
                return Err(Error::Config("eval needs --pred/--gt or --embeddings".into()));
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(None)
        }
        Cmd::Gradcheck { out } => {
            let mut checks: Vec<GradCheck> = core_suite(g.seed, 1e-6);
            checks.extend(avatar3d::lifting::train::loss_gradchecks::<f32>(g.seed, 1e-4)?);
            for c in &checks {
                println!("{:<28} {:>10.3e} {}", c.op, c.max_rel_error, if c.passed { "ok" } else { "FAIL" });
            }
            if let Some(p) = out {
                write_json(&p, &checks)?;
            }
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.op.as_str()).collect();
            Ok((!failed.is_empty()).then(|| Flagged(format!("gradient checks failed: {failed:?}"))))
        }
        Cmd::BenchMc { res, chunk } => {
            let grid = GridConfig::cube(res, 1.0).with_chunk(chunk);
            let sphere = SphereSdf {
                center: Vec3::zeros(),
                radius: 0.5,
            };
            let t = Instant::now();
            let m = marching_cubes(&sphere, &grid)?;
            #[derive(Serialize)]
            struct Bench {
                resolution: usize,
                chunk: usize,
                seconds: f64,
                vertices: usize,
                faces: usize,
                euler_characteristic: i64,
            }
            let b = Bench {
                resolution: res,
                chunk,
                seconds: t.elapsed().as_secs_f64(),
                vertices: m.mesh.vertices.len(),
                faces: m.mesh.faces.len(),
                euler_characteristic: m.mesh.euler_characteristic(),
            };
            println!("{}", serde_json::to_string_pretty(&b)?);
            Ok(None)
        }
    }
}

fn train_gen(g: &Global, a: GenTrainArgs, view: View) -> Result<Option<Flagged>> {
    let cfg = config(g)?;
    let ds = Dataset::open(&a.data)?;
    let samples = ds.load_split(Split::Train)?;
    let plan = GeneratorTraining {
        pretrain_steps: a.pretrain_iters,
        finetune_steps: a.finetune_iters,
        batch_size: a.batch,
        lr: a.lr,
        seed: g.seed,
        ..GeneratorTraining::default()
    };
    let (d, losses) = train_generator(&samples, view, &cfg, &plan)?;
    let file = match view {
        View::Front => FRONT_FILE,
        View::Back => BACK_FILE,
    };
    std::fs::create_dir_all(&a.models)?;
    save_denoiser(&a.models.join(file), &d)?;
    write_json(&a.models.join(format!("{file}.losses.json")), &losses)?;
    Ok(None)
}
