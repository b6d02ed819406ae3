//! Widen a pretrained denoiser's input layer with zero-initialized channels
//! for a conditioning latent, check the output is unchanged, then fine-tune
//! only the encoder convolutions.
//!
//! `cargo run --release --example channel_padding`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avatar3d::diffusion::{
    text_embedding, train_denoiser, ConvDenoiser, ConvDenoiserSpec, DenoiseBatch, Denoiser, DropoutConfig, NoiseSchedule,
    ScheduleKind, TrainConfig, TrainItem, TrainableDenoiser,
};
use avatar3d::neural::Tensor;

fn main() -> avatar3d::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut noise = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    };
    let mut d = ConvDenoiser::new(
        ConvDenoiserSpec {
            latent: [8, 8, 12],
            cond_channels: 0,
            width: 8,
            mid_width: 8,
        },
        1,
    )?;
    let z = noise(&[1, 8, 8, 12])?;
    let batch = |cond| DenoiseBatch {
        z: z.clone(),
        t: vec![300],
        t_max: 1000,
        text: vec![text_embedding("green jacket")],
        cond,
    };
    let before = d.predict(&batch(None))?;
    d.pad_condition_channels(24)?;
    let after = d.predict(&batch(Some(noise(&[1, 8, 8, 24])?)))?;
    println!("output unchanged after padding: {}", before == after);

    d.store_mut().mark_trainable_glob(&["encoder.conv_*"])?;
    for name in d.store().names() {
        let (t, trainable) = d.store().entry(name).unwrap();
        println!("{name:<24} {:?} {}", t.shape(), if trainable { "trainable" } else { "frozen" });
    }
    let frozen = d.store().clone();
    let items: Vec<TrainItem> = (0..8)
        .map(|_| {
            Ok(TrainItem {
                x0: noise(&[8, 8, 12])?,
                text: text_embedding("green jacket"),
                cond: Some(noise(&[8, 8, 24])?),
            })
        })
        .collect::<avatar3d::Result<_>>()?;
    let sched = NoiseSchedule::new(1000, ScheduleKind::Cosine)?;
    let cfg = TrainConfig {
        steps: 50,
        batch_size: 4,
        lr: 1e-3,
        dropout: DropoutConfig::default(),
        seed: 2,
    };
    let losses = train_denoiser(&mut d, &sched, &items, &cfg)?;
    let untouched = frozen
        .names()
        .filter(|n| !frozen.entry(n).unwrap().1)
        .all(|n| frozen.entry(n).unwrap().0 == d.store().entry(n).unwrap().0);
    println!("loss {:.4} -> {:.4}; frozen tensors untouched: {untouched}", losses[0], losses[losses.len() - 1]);
    Ok(())
}
