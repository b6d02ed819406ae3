//! Two controlled comparisons at reduced scale: lifting with and without
//! the body control image, and partial against full fine-tuning.
//!
//! `cargo run --release --example ablation -- [subjects]`

use avatar3d::lifting::LiftTrainConfig;
use avatar3d::pipeline::ablation::{control_ablation, finetune_forgetting, ControlAblation, ForgettingPlan};
use avatar3d::pipeline::{make_synthetic_dataset, Dataset, PipelineConfig, Split};

fn main() -> avatar3d::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let scratch = std::env::temp_dir().join(format!("avatar3d_ablation_{}", std::process::id()));

    let cfg = PipelineConfig::default();
    make_synthetic_dataset(&scratch.join("64"), n, 0, &cfg)?;
    let ds = Dataset::open(&scratch.join("64"))?;
    let (train, test) = (ds.load_split(Split::Train)?, ds.load_split(Split::Test)?);
    let plan = ControlAblation {
        train: LiftTrainConfig {
            steps: 200,
            ..LiftTrainConfig::default()
        },
        ..ControlAblation::default()
    };
    for r in control_ablation(&train, &test, ds.cameras()?, &cfg, &plan, &[0])? {
        println!(
            "seed {}: Chamfer x1e3 with control {:.3}, without {:.3}, empty {:?}",
            r.seed, r.with_control, r.without_control, r.empty
        );
    }

    let small = PipelineConfig {
        image_size: 32,
        ..PipelineConfig::default()
    };
    make_synthetic_dataset(&scratch.join("32"), n, 0, &small)?;
    let ds = Dataset::open(&scratch.join("32"))?;
    let (train, test) = (ds.load_split(Split::Train)?, ds.load_split(Split::Test)?);
    let plan = ForgettingPlan {
        pretrain_steps: 600,
        ..ForgettingPlan::default()
    };
    let r = finetune_forgetting(&train, &test, &small, &plan, 0)?;
    println!(
        "held-out loss {:.4}; after fine-tuning on {} subjects: encoder convs {:+.4}, all parameters {:+.4}",
        r.base,
        r.narrow_subjects,
        r.partial_degradation(),
        r.full_degradation()
    );
    std::fs::remove_dir_all(&scratch)?;
    Ok(())
}
