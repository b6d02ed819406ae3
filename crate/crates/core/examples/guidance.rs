//! Two-scale classifier-free guidance on a conditioned stub denoiser: the
//! guided prediction moves linearly with each scale, and (1, 1) reproduces
//! the fully conditioned prediction.
//!
//! `cargo run --release --example guidance`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avatar3d::diffusion::sampler::Conditioning;
use avatar3d::diffusion::{
    cfg_predict, dropout_draw, text_embedding, ConvDenoiser, ConvDenoiserSpec, DropBranch, DropoutConfig, GuidanceConfig,
};
use avatar3d::neural::Tensor;

fn main() -> avatar3d::Result<()> {
    let d = ConvDenoiser::new(
        ConvDenoiserSpec {
            latent: [8, 8, 3],
            cond_channels: 3,
            width: 8,
            mid_width: 8,
        },
        5,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = Tensor::new(vec![1, 8, 8, 3], (0..192).map(|_| rng.random_range(-1.0f32..1.0)).collect())?;
    let cond = Conditioning {
        text: text_embedding("a person in a red shirt"),
        cond: Some(Tensor::new(vec![8, 8, 3], (0..192).map(|_| rng.random_range(-1.0f32..1.0)).collect())?),
    };
    let base = cfg_predict(&d, &z, 500, 1000, &cond, &GuidanceConfig::new(1.0, 1.0)?)?;
    for (st, si) in [(1.0, 1.0), (2.0, 1.0), (3.0, 1.0), (1.0, 2.0), (7.5, 1.5)] {
        let g = cfg_predict(&d, &z, 500, 1000, &cond, &GuidanceConfig::new(st, si)?)?;
        println!("s_text {st:>3} s_image {si:>3}: max |diff| to (1, 1) = {:.4e}", g.max_abs_diff(&base));
    }

    let cfg = DropoutConfig::default();
    let mut counts = [0usize; 4];
    for _ in 0..100_000 {
        counts[dropout_draw(&cfg, &mut rng) as usize] += 1;
    }
    for (b, c) in [DropBranch::KeepAll, DropBranch::DropText, DropBranch::DropImage, DropBranch::DropBoth]
        .iter()
        .zip(counts)
    {
        println!("{b:?}: {:.4}", c as f64 / 1e5);
    }
    Ok(())
}
