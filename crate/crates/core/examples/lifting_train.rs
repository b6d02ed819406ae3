//! Train the pixel-aligned lifting network on synthetic subjects, then
//! extract and score a held-out subject.
//!
//! `cargo run --release --example lifting_train -- [steps] [out_dir]`

use std::path::PathBuf;

use avatar3d::lifting::{build_field, marching_cubes, LiftTrainConfig, PointCounts};
use avatar3d::mesh::write_ply;
use avatar3d::metrics::{evaluate_meshes, EvalConfig};
use avatar3d::pipeline::models::lifting_subjects;
use avatar3d::pipeline::{make_synthetic_dataset, train_lift, Dataset, PipelineConfig, Split};

fn main() -> avatar3d::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/lifting".into()));
    let cfg = PipelineConfig::default();
    let data = out.join("data");
    make_synthetic_dataset(&data, 60, 0, &cfg)?;
    let ds = Dataset::open(&data)?;
    let train = ds.load_split(Split::Train)?;
    let test = ds.load_split(Split::Test)?;

    let tc = LiftTrainConfig {
        steps,
        ..LiftTrainConfig::default()
    };
    let pool = PointCounts {
        surface: 2048,
        near: 2048,
        uniform: 0,
    };
    let subjects = lifting_subjects(&train, &cfg.lifting, ds.cameras()?, pool, tc.lo, tc.hi, 0)?;
    let (net, _) = train_lift(&subjects, &cfg, true, &tc, |i, b| {
        if i % 50 == 0 {
            println!("step {i:>4}: total {:.4}", b.total);
        }
    })?;

    let s = &test[0];
    let field = build_field(&s.lifting_input(&net.spec, ds.cameras()?), &net)?;
    let m = marching_cubes(&field, &cfg.grid(64))?;
    write_ply(&out.join("test_subject.ply"), &m.mesh, Some(&m.normals), Some(&m.colors))?;
    let report = evaluate_meshes(
        &m.mesh,
        &s.mesh,
        &EvalConfig {
            samples: 10_000,
            ..EvalConfig::default()
        },
    )?;
    println!("{}: {}", s.record.id, serde_json::to_string(&report)?);
    Ok(())
}
