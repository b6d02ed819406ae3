//! Text- and pose-conditioned generation: front view, back view, lifting,
//! surface extraction and anchoring, written to an output directory.
//!
//! `cargo run --release --example cascade -- [out_dir] [models_dir]`
//!
//! Without `models_dir` a small model set is trained first.

mod common;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use avatar3d::body::{PoseParams, ShapeParams};
use avatar3d::pipeline::dataset::random_pose;
use avatar3d::pipeline::{GenerationRequest, Pipeline, QualityPreset};

fn main() -> avatar3d::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/cascade".into()));
    let models_dir = args.next().map(PathBuf::from);
    let cfg = common::small_config();
    let models = common::models(&cfg, models_dir.as_deref(), &out)?;
    let pipe = Pipeline::new(&cfg, &models)?;

    let pose = PoseParams::zero(pipe.body.num_joints());
    let varied = random_pose(&pipe.body, &mut ChaCha8Rng::seed_from_u64(4))?;
    let preset = QualityPreset::custom(10, 64)?;
    for (i, (prompt, pose)) in [("a person in a red shirt and blue pants", pose), ("a person in a yellow dress", varied)]
        .into_iter()
        .enumerate()
    {
        let mut req = GenerationRequest::new(Some(prompt), pose, ShapeParams::zero(cfg.num_betas), i as u64);
        req.preset = preset;
        let res = pipe.cascade_generate(&req)?;
        let report = res.report(req.seed, Some(prompt), preset);
        res.write(&out.join(format!("sample_{i}")), &report)?;
        println!("{prompt}: {}", serde_json::to_string(&report)?);
    }
    Ok(())
}
