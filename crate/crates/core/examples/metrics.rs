//! Score a perturbed, misaligned copy of a body mesh against the original:
//! Chamfer, normal consistency and IoU after ICP alignment.
//!
//! `cargo run --release --example metrics`

use nalgebra::Rotation3;

use avatar3d::body::{lbs_pose, make_default_body, PoseParams, ShapeParams};
use avatar3d::metrics::{evaluate_meshes, icp_align, rotation_distance, EvalConfig, PointCloud, RigidTransform};
use avatar3d::mesh::Vec3;

fn main() -> avatar3d::Result<()> {
    let body = make_default_body(12, 8)?;
    let gt = lbs_pose(&body, &PoseParams::zero(body.num_joints()), &ShapeParams::zero(8))?.to_mesh();
    let rot = *Rotation3::from_axis_angle(&Vec3::y_axis(), 0.2).matrix();
    let truth = RigidTransform::new(rot, Vec3::new(0.05, -0.02, 0.1))?;
    let normals = gt.vertex_normals();
    let mut pred = gt.clone();
    for (v, n) in pred.vertices.iter_mut().zip(&normals) {
        *v = truth.apply(&(*v + n * 0.005));
    }

    let src = PointCloud::sample_mesh(&pred, 4000, 1)?;
    let dst = PointCloud::sample_mesh(&gt, 4000, 2)?;
    let icp = icp_align(&src.points, &dst.points, 50, false)?;
    println!(
        "ICP: {} iterations, rmse {:.4} -> {:.4}, rotation error {:.4} rad",
        icp.iterations,
        icp.rmse_history[0],
        icp.rmse,
        rotation_distance(&icp.transform.rotation, &truth.inverse().rotation)
    );

    let report = evaluate_meshes(
        &pred,
        &gt,
        &EvalConfig {
            samples: 20_000,
            ..EvalConfig::default()
        },
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
