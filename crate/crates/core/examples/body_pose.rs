//! Pose the procedural skinned body with a random pose and shape and write
//! the rest and posed meshes as OBJ.
//!
//! `cargo run --release --example body_pose -- [out_dir] [seed]`

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use avatar3d::body::{forward_kinematics, lbs_pose, make_default_body};
use avatar3d::mesh::write_obj;
use avatar3d::pipeline::dataset::{random_pose, random_shape};

fn main() -> avatar3d::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/body_pose".into()));
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    std::fs::create_dir_all(&out)?;

    let body = make_default_body(12, 8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = random_pose(&body, &mut rng)?;
    let shape = random_shape(8, &mut rng)?;

    let rest = body.template_mesh();
    let posed = lbs_pose(&body, &pose, &shape)?.to_mesh();
    write_obj(&out.join("rest.obj"), &rest, None)?;
    write_obj(&out.join("posed.obj"), &posed, None)?;

    println!(
        "{} joints, {} vertices, {} faces, watertight {}",
        body.num_joints(),
        posed.vertices.len(),
        posed.faces.len(),
        posed.is_watertight()
    );
    for (j, g) in forward_kinematics(&body, &pose)?.iter().enumerate() {
        let t = g.translation.vector;
        println!("joint {j:>2} parent {:?} at [{:+.3} {:+.3} {:+.3}]", body.parents[j], t.x, t.y, t.z);
    }
    println!("wrote {}", out.display());
    Ok(())
}
