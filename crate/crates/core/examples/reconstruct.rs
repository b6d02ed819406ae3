//! Single-image reconstruction: a held-out front render is completed with a
//! generated back view, lifted to a mesh and scored against ground truth.
//!
//! `cargo run --release --example reconstruct -- [out_dir] [models_dir]`

mod common;

use std::path::PathBuf;

use avatar3d::metrics::{evaluate_meshes, EvalConfig};
use avatar3d::pipeline::{make_synthetic_dataset, Dataset, Pipeline, QualityPreset, Split};

fn main() -> avatar3d::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/reconstruct".into()));
    let models_dir = args.next().map(PathBuf::from);
    let cfg = common::small_config();
    let models = common::models(&cfg, models_dir.as_deref(), &out)?;
    let pipe = Pipeline::new(&cfg, &models)?;

    let held = out.join("held_out");
    make_synthetic_dataset(&held, 10, 99, &cfg)?;
    let ds = Dataset::open(&held)?;
    let preset = QualityPreset::custom(10, 64)?;
    for s in ds.load_split(Split::Test)?.iter().chain(&ds.load_split(Split::Train)?).take(3) {
        let res = pipe.reconstruct(&s.front, Some(&s.record.prompt), preset, 0)?;
        if let Some(why) = &res.flagged {
            println!("{}: flagged ({why})", s.record.id);
            continue;
        }
        let eval = evaluate_meshes(
            &res.extracted.mesh,
            &s.mesh,
            &EvalConfig {
                samples: 10_000,
                ..EvalConfig::default()
            },
        )?;
        println!("{}: Chamfer x1e3 {:.3}, NC {:.3}", s.record.id, eval.chamfer_x1e3, eval.nc);
        res.write(&out.join(&s.record.id), &res.report(0, Some(&s.record.prompt), preset))?;
    }
    Ok(())
}
