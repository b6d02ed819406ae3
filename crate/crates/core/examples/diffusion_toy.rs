//! Train a small denoiser on a two-mode Gaussian mixture and compare DDIM
//! samples at several step counts by sliced Wasserstein distance.
//!
//! `cargo run --release --example diffusion_toy -- [train_steps]`

use avatar3d::diffusion::toy::ToyTask;
use avatar3d::diffusion::{NoiseSchedule, ScheduleKind};

fn main() -> avatar3d::Result<()> {
    let mut task = ToyTask::default();
    if let Some(steps) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        task.train_steps = steps;
    }
    let sched = NoiseSchedule::new(1000, ScheduleKind::Cosine)?;
    let data = task.sample_data(2048, 0);
    let (den, losses) = task.train(&sched, &data, 0)?;
    let tail = &losses[losses.len().saturating_sub(200)..];
    println!("trained {} steps, final loss {:.4}", task.train_steps, tail.iter().sum::<f64>() / tail.len() as f64);
    for steps in [1, 2, 5, 10, 25, 50] {
        let d = task.sample_distance(&den, &sched, steps, 512, 1)?;
        println!("{steps:>3} DDIM steps: sliced W1 to fresh data {d:.4}");
    }
    let floor = avatar3d::metrics::sliced_wasserstein1(&task.sample_data(512, 2), &task.sample_data(512, 3), 64, 1)?;
    println!("data vs data: {floor:.4}");
    Ok(())
}
