//! Anchor a clothed scan to the body in both modes, repose it along a short
//! walk cycle and write the frames as OBJ.
//!
//! `cargo run --release --example rigging -- [out_dir]`

use std::path::PathBuf;

use avatar3d::body::{lbs_pose, make_default_body, PoseParams, ShapeParams};
use avatar3d::mesh::{write_obj, Vec3};
use avatar3d::rigging::{anchor_to_body, AnchorMode};

fn main() -> avatar3d::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/rigging".into()));
    std::fs::create_dir_all(&out)?;
    let body = make_default_body(12, 8)?;
    let nj = body.num_joints();
    let shape = ShapeParams::zero(8);
    let pose = PoseParams::zero(nj);

    // Loose garment: push the torso and legs outward along their normals.
    let mut scan = lbs_pose(&body, &pose, &shape)?.to_mesh();
    let normals = scan.vertex_normals();
    for ((v, n), part) in scan.vertices.iter_mut().zip(&normals).zip(&body.vertex_parts) {
        if !part.is_arm() {
            *v += n * 0.02;
        }
    }

    let frames: Vec<(PoseParams, ShapeParams)> = (0..8)
        .map(|i| {
            let a = (i as f64 / 8.0 * std::f64::consts::TAU).sin() * 0.5;
            let mut p = PoseParams::zero(nj);
            for (j, parent) in body.parents.iter().enumerate() {
                // Swing every limb joint hanging directly off the root.
                if *parent == Some(0) && body.joints[j].y < body.joints[0].y {
                    let sign = if body.joints[j].x > 0.0 { 1.0 } else { -1.0 };
                    p = p.with_rotation(j, Vec3::new(sign * a, 0.0, 0.0))?;
                }
            }
            Ok((p, shape.clone()))
        })
        .collect::<avatar3d::Result<_>>()?;

    for mode in [AnchorMode::Surface, AnchorMode::WeightTransfer] {
        let anchored = anchor_to_body(&scan, None, &body, &pose, &shape, mode)?;
        let back = anchored.repose(&body, &pose, &shape)?;
        let err = back.vertices.iter().zip(&scan.vertices).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        println!("{mode:?}: round-trip error {err:.2e}");
        for (i, m) in anchored.animate(&body, &frames)?.iter().enumerate() {
            write_obj(&out.join(format!("{mode:?}_{i:02}.obj").to_lowercase()), m, None)?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
