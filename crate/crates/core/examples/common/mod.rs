//! Shared setup for the pipeline examples: a small configuration and a
//! quickly trained model set, or checkpoints loaded from a directory.

use std::path::Path;

use avatar3d::lifting::{LiftTrainConfig, LiftingSpec, PointCounts};
use avatar3d::pipeline::models::lifting_subjects;
use avatar3d::pipeline::{
    make_synthetic_dataset, train_generator, train_lift, Dataset, GeneratorTraining, Models, PipelineConfig, Split, View,
};

/// 32-pixel images and narrow networks, fast enough to train in a minute or two.
pub fn small_config() -> PipelineConfig {
    PipelineConfig {
        image_size: 32,
        lifting: LiftingSpec {
            encoder_stages: vec![16, 16],
            hidden: vec![32, 32],
            ..LiftingSpec::default()
        },
        ..PipelineConfig::default()
    }
}

/// Load checkpoints from `dir` or, without one, train every network
/// briefly on a fresh synthetic dataset.
pub fn models(cfg: &PipelineConfig, dir: Option<&Path>, scratch: &Path) -> avatar3d::Result<Models> {
    if let Some(dir) = dir {
        return Models::load(dir);
    }
    let data = scratch.join("data");
    make_synthetic_dataset(&data, 40, 0, cfg)?;
    let ds = Dataset::open(&data)?;
    let train = ds.load_split(Split::Train)?;
    let plan = GeneratorTraining {
        pretrain_steps: 200,
        finetune_steps: 200,
        ..GeneratorTraining::default()
    };
    eprintln!("training generators on {} subjects", train.len());
    let (front, _) = train_generator(&train, View::Front, cfg, &plan)?;
    let (back, _) = train_generator(&train, View::Back, cfg, &plan)?;
    let lt = LiftTrainConfig {
        steps: 150,
        ..LiftTrainConfig::default()
    };
    let pool = PointCounts {
        surface: 1024,
        near: 1024,
        uniform: 0,
    };
    let mut nets = Vec::new();
    for use_control in [true, false] {
        eprintln!("training lifting net, control {use_control}");
        let spec = LiftingSpec {
            use_control,
            ..cfg.lifting.clone()
        };
        let subjects = lifting_subjects(&train, &spec, ds.cameras()?, pool, lt.lo, lt.hi, 0)?;
        nets.push(train_lift(&subjects, cfg, use_control, &lt, |_, _| {})?.0);
    }
    let lift_rgb = nets.pop();
    Ok(Models {
        dir: scratch.join("models"),
        front: Some(front),
        back: Some(back),
        lift: nets.pop(),
        lift_rgb,
    })
}
