//! Extract an analytic sphere at several grid resolutions and write the
//! finest one as PLY with normals.
//!
//! `cargo run --release --example marching_cubes -- [out_dir]`

use std::path::PathBuf;
use std::time::Instant;

use avatar3d::lifting::mc::SphereSdf;
use avatar3d::lifting::{marching_cubes, GridConfig};
use avatar3d::mesh::{write_ply, Vec3};

fn main() -> avatar3d::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/marching_cubes".into()));
    std::fs::create_dir_all(&out)?;
    let sphere = SphereSdf {
        center: Vec3::zeros(),
        radius: 0.5,
    };
    let mut last = None;
    for n in [32, 64, 128, 256] {
        let grid = GridConfig::cube(n, 1.0);
        let t = Instant::now();
        let m = marching_cubes(&sphere, &grid)?;
        let err = m.mesh.vertices.iter().map(|v| (v.norm() - 0.5).abs()).fold(0.0, f64::max);
        println!(
            "N={n:>3}: {:>7} faces, max radial error {err:.2e} (cell diagonal {:.2e}), chi {}, watertight {}, {:.2}s",
            m.mesh.faces.len(),
            grid.cell_diagonal(),
            m.mesh.euler_characteristic(),
            m.mesh.is_watertight(),
            t.elapsed().as_secs_f64()
        );
        last = Some(m);
    }
    let m = last.unwrap();
    write_ply(&out.join("sphere.ply"), &m.mesh, Some(&m.normals), None)?;
    println!("wrote {}", out.display());
    Ok(())
}
