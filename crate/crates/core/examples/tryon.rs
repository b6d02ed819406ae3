//! Try-on editing: keep the head region of a generated front view and
//! regenerate the rest from a new prompt.
//!
//! `cargo run --release --example tryon -- [out_dir] [models_dir]`

mod common;

use std::path::PathBuf;

use avatar3d::body::{PoseParams, ShapeParams};
use avatar3d::pipeline::{GenerationRequest, Pipeline, QualityPreset};

fn main() -> avatar3d::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/tryon".into()));
    let models_dir = args.next().map(PathBuf::from);
    let cfg = common::small_config();
    let models = common::models(&cfg, models_dir.as_deref(), &out)?;
    let pipe = Pipeline::new(&cfg, &models)?;
    let preset = QualityPreset::custom(10, 64)?;

    let mut req = GenerationRequest::new(
        Some("a person in a blue shirt and black pants"),
        PoseParams::zero(pipe.body.num_joints()),
        ShapeParams::zero(cfg.num_betas),
        1,
    );
    req.preset = preset;
    let source = pipe.cascade_generate(&req)?;

    // Top quarter of the image holds the head.
    let n = cfg.image_size;
    let head: Vec<bool> = (0..n * n).map(|i| i / n < n / 4).collect();
    req.prompt = Some("a person in a green jacket and white shorts".into());
    req.seed = 2;
    let edited = pipe.tryon_edit(&source.front, &head, &req)?;

    let (mut diff, mut count) = (0.0f64, 0usize);
    for (i, &keep) in head.iter().enumerate() {
        if keep {
            for c in 0..3 {
                diff += (source.front.data[i * 3 + c] - edited.front.data[i * 3 + c]).abs() as f64;
                count += 1;
            }
        }
    }
    println!("head region mean abs change {:.4}", diff / count as f64);
    source.write(&out.join("source"), &source.report(1, Some("source"), preset))?;
    edited.write(&out.join("edited"), &edited.report(2, req.prompt.as_deref(), preset))?;
    println!("wrote {}", out.display());
    Ok(())
}
