//! Render the 6-channel body control image from the front and back cameras,
//! save it in the tensor container and preview the template-coordinate
//! channels as PNG.
//!
//! `cargo run --release --example rasterize_control -- [out_dir] [size]`

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use avatar3d::body::{make_default_body, ShapeParams};
use avatar3d::container::{self, Tensor, TensorMap};
use avatar3d::pipeline::dataset::random_pose;
use avatar3d::pipeline::Framing;
use avatar3d::raster::{render_control, save_png, AttributeImage};

fn main() -> avatar3d::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/control".into()));
    let size: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(128);
    std::fs::create_dir_all(&out)?;

    let body = make_default_body(12, 8)?;
    let pose = random_pose(&body, &mut ChaCha8Rng::seed_from_u64(3))?;
    let shape = ShapeParams::zero(8);
    let (front_cam, back_cam) = Framing::canonical(&body).cameras(size)?;

    let mut map = TensorMap::new();
    for (name, cam) in [("front", front_cam), ("back", back_cam)] {
        let img = render_control(&body, &pose, &shape, &cam)?;
        println!("{name}: {}x{}x{}, {} covered pixels", img.height, img.width, img.channels, img.coverage());
        // Template coordinates lie in [0, 1]: preview them as RGB.
        let rgb: Vec<f32> = img.data.chunks_exact(6).flat_map(|p| [p[0], p[1], p[2]]).collect();
        let mut preview = AttributeImage::from_data(img.height, img.width, 3, rgb)?;
        preview.mask = img.mask.clone();
        save_png(&out.join(format!("{name}_template.png")), &preview)?;
        map.insert(format!("{name}.control"), Tensor::f32(vec![img.height, img.width, 6], img.data.clone()));
        map.insert(
            format!("{name}.mask"),
            Tensor::u8(vec![img.height, img.width], img.mask.iter().map(|&m| u8::from(m)).collect()),
        );
    }
    container::save(&out.join("control.aptc"), &map)?;
    println!("wrote {}", out.display());
    Ok(())
}
