//! Controlled comparisons: lifting with and without the body control
//! image, and partial against full fine-tuning of a pretrained generator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::dataset::{Sample, PALETTE};
use super::models::{generator_items, lifting_subjects, train_generator, train_lift, with_control, GeneratorTraining, View};
use crate::diffusion::train::diffusion_loss_value;
use crate::diffusion::{stream_rng, train_denoiser, ConvDenoiser, DropoutConfig, Stream, TrainConfig, TrainItem, TrainableDenoiser};
use crate::error::{param_err, Result};
use crate::lifting::{build_field, marching_cubes, LiftTrainConfig, LiftingNet, PointCounts};
use crate::metrics::{chamfer, PointCloud};
use crate::raster::Camera;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlAblation {
    pub train: LiftTrainConfig,
    /// Supervision pool per training subject, shared by both variants.
    pub pool: PointCounts,
    pub mc_resolution: usize,
    /// Surface samples per mesh for Chamfer.
    pub eval_samples: usize,
}

impl Default for ControlAblation {
    fn default() -> Self {
        Self {
            train: LiftTrainConfig {
                steps: 400,
                ..LiftTrainConfig::default()
            },
            pool: PointCounts {
                surface: 2048,
                near: 2048,
                uniform: 0,
            },
            mc_resolution: 64,
            eval_samples: 5000,
        }
    }
}

/// Mean test Chamfer (x1e-3, no alignment) of both variants for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlAblationRun {
    pub seed: u64,
    pub with_control: f64,
    pub without_control: f64,
    /// Test subjects whose extraction found no surface, per variant.
    pub empty: [usize; 2],
}

/// Chamfer x1e-3 of the extracted surface of every test subject against its
/// ground-truth mesh; `None` when no surface was found.
pub fn test_chamfers(
    net: &LiftingNet,
    test: &[Sample],
    cameras: (Camera, Camera),
    cfg: &PipelineConfig,
    mc_resolution: usize,
    samples: usize,
) -> Result<Vec<Option<f64>>> {
    let grid = cfg.grid(mc_resolution);
    test.par_iter()
        .enumerate()
        .map(|(i, s)| {
            let field = build_field(&s.lifting_input(&net.spec, cameras), net)?;
            let m = marching_cubes(&field, &grid)?;
            if m.empty {
                return Ok(None);
            }
            let pred = PointCloud::sample_mesh(&m.mesh, samples, 2 * i as u64)?;
            let gt = PointCloud::sample_mesh(&s.mesh, samples, 2 * i as u64 + 1)?;
            Ok(Some(chamfer(&pred.points, &gt.points)? * 1e3))
        })
        .collect()
}

fn mean_found(v: &[Option<f64>]) -> (f64, usize) {
    let found: Vec<f64> = v.iter().flatten().copied().collect();
    let mean = if found.is_empty() {
        f64::INFINITY
    } else {
        found.iter().sum::<f64>() / found.len() as f64
    };
    (mean, v.len() - found.len())
}

/// Train a lifting net with and without the control image per seed and
/// score both on the test subjects. Point pools are drawn once.
pub fn control_ablation(
    train: &[Sample],
    test: &[Sample],
    cameras: (Camera, Camera),
    cfg: &PipelineConfig,
    plan: &ControlAblation,
    seeds: &[u64],
) -> Result<Vec<ControlAblationRun>> {
    if train.is_empty() || test.is_empty() {
        return param_err("the ablation needs training and test subjects");
    }
    let t = &plan.train;
    let pools = lifting_subjects(train, &cfg.lifting, cameras, plan.pool, t.lo, t.hi, 0)?;
    seeds
        .iter()
        .map(|&seed| {
            let tc = LiftTrainConfig { seed, ..t.clone() };
            let mut scores = [(0.0, 0); 2];
            for (k, use_control) in [true, false].into_iter().enumerate() {
                let subjects = with_control(&pools, train, use_control);
                let (net, _) = train_lift(&subjects, cfg, use_control, &tc, |_, _| {})?;
                let c = test_chamfers(&net, test, cameras, cfg, plan.mc_resolution, plan.eval_samples)?;
                scores[k] = mean_found(&c);
            }
            Ok(ControlAblationRun {
                seed,
                with_control: scores[0].0,
                without_control: scores[1].0,
                empty: [scores[0].1, scores[1].1],
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingPlan {
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub batch_size: usize,
    /// Upper-garment color of the narrowed fine-tuning subset.
    pub narrow_color: String,
    /// Parameter globs of the partial variant.
    pub partial: Vec<String>,
    pub eval_batches: usize,
}

impl Default for ForgettingPlan {
    fn default() -> Self {
        Self {
            pretrain_steps: 1500,
            pretrain_lr: 2e-3,
            finetune_steps: 300,
            finetune_lr: 5e-3,
            batch_size: 8,
            narrow_color: "red".into(),
            partial: vec!["encoder.conv_*".into()],
            eval_batches: 16,
        }
    }
}

/// Held-out losses before and after each kind of fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRun {
    pub seed: u64,
    pub narrow_subjects: usize,
    pub base: f64,
    pub partial: f64,
    pub full: f64,
}

impl ForgettingRun {
    pub fn partial_degradation(&self) -> f64 {
        self.partial - self.base
    }

    pub fn full_degradation(&self) -> f64 {
        self.full - self.base
    }
}

/// Text-conditioned noise-prediction loss on fixed noise draws.
pub fn held_out_loss(d: &ConvDenoiser, items: &[TrainItem], cfg: &PipelineConfig, batches: usize) -> Result<f64> {
    let sched = cfg.schedule()?;
    let refs: Vec<&TrainItem> = items.iter().collect();
    let mut rng = stream_rng(0x4e1d, Stream::Training);
    let mut total = 0.0;
    for _ in 0..batches {
        total += diffusion_loss_value(d, &refs, &sched, &DropoutConfig::none(), &mut rng)?;
    }
    Ok(total / batches as f64)
}

/// Pretrain a text-to-image front generator on `train`, widen it for the
/// control latent, then fine-tune on the narrowed subset once with the
/// partial globs and once with every parameter. Losses are measured on
/// `test` without the control latent.
pub fn finetune_forgetting(
    train: &[Sample],
    test: &[Sample],
    cfg: &PipelineConfig,
    plan: &ForgettingPlan,
    seed: u64,
) -> Result<ForgettingRun> {
    let Some(color) = PALETTE.iter().position(|(n, _)| *n == plan.narrow_color) else {
        return param_err(format!("unknown palette color {:?}", plan.narrow_color));
    };
    let narrow: Vec<Sample> = train.iter().filter(|s| s.record.outfit.upper_color == color).cloned().collect();
    if narrow.is_empty() || test.is_empty() {
        return param_err("the narrowed subset and the held-out set must be non-empty");
    }
    let pre = GeneratorTraining {
        pretrain_steps: plan.pretrain_steps,
        finetune_steps: 0,
        batch_size: plan.batch_size,
        lr: plan.pretrain_lr,
        seed,
        ..GeneratorTraining::default()
    };
    let all = PipelineConfig {
        finetune_trainable: vec!["*".into()],
        ..cfg.clone()
    };
    let (base, _) = train_generator(train, View::Front, &all, &pre)?;
    let held = generator_items(test, View::Front, cfg, false)?;
    let items = generator_items(&narrow, View::Front, cfg, true)?;
    let sched = cfg.schedule()?;
    let tune = |patterns: &[String]| -> Result<f64> {
        let mut d = base.clone();
        let pats: Vec<&str> = patterns.iter().map(String::as_str).collect();
        d.store_mut().mark_trainable_glob(&pats)?;
        let tc = TrainConfig {
            steps: plan.finetune_steps,
            batch_size: plan.batch_size,
            lr: plan.finetune_lr,
            dropout: DropoutConfig::default(),
            seed: seed ^ 0xf1e,
        };
        train_denoiser(&mut d, &sched, &items, &tc)?;
        held_out_loss(&d, &held, cfg, plan.eval_batches)
    };
    Ok(ForgettingRun {
        seed,
        narrow_subjects: narrow.len(),
        base: held_out_loss(&base, &held, cfg, plan.eval_batches)?,
        partial: tune(&plan.partial)?,
        full: tune(&["*".to_string()])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::LiftingSpec;
    use crate::pipeline::{make_synthetic_dataset, Dataset, Split};

    fn tiny() -> PipelineConfig {
        PipelineConfig {
            image_size: 16,
            body_ring: 8,
            num_betas: 4,
            denoiser_width: 4,
            denoiser_mid_width: 4,
            lifting: LiftingSpec {
                encoder_stages: vec![4, 4],
                hidden: vec![8, 8],
                pe_levels: 2,
                ..LiftingSpec::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn both_comparisons_run_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        make_synthetic_dataset(dir.path(), 30, 3, &cfg).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let train = ds.load_split(Split::Train).unwrap();
        let test = ds.load_split(Split::Test).unwrap();
        let plan = ControlAblation {
            train: LiftTrainConfig {
                steps: 3,
                ..LiftTrainConfig::default()
            },
            pool: PointCounts {
                surface: 64,
                near: 64,
                uniform: 0,
            },
            mc_resolution: 16,
            eval_samples: 200,
        };
        let runs = control_ablation(&train, &test[..2], ds.cameras().unwrap(), &cfg, &plan, &[0]).unwrap();
        assert_eq!(runs.len(), 1);
        let r = &runs[0];
        assert!(r.with_control.is_finite() || r.empty[0] == 2);

        let color = PALETTE[train[0].record.outfit.upper_color].0.to_string();
        let plan = ForgettingPlan {
            pretrain_steps: 3,
            finetune_steps: 3,
            narrow_color: color,
            eval_batches: 2,
            ..ForgettingPlan::default()
        };
        let f = finetune_forgetting(&train, &test, &cfg, &plan, 1).unwrap();
        assert!(f.narrow_subjects >= 1);
        assert!(f.base.is_finite() && f.partial.is_finite() && f.full.is_finite());
        assert_eq!(f, finetune_forgetting(&train, &test, &cfg, &plan, 1).unwrap());
        let bad = ForgettingPlan {
            narrow_color: "teal".into(),
            ..plan
        };
        assert!(finetune_forgetting(&train, &test, &cfg, &bad, 1).is_err());
    }
}
