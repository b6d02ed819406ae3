//! Round-trip a mixed-dtype tensor map through the binary container and
//! show the aligned layout and the corruption checks.
//!
//! `cargo run --release --example container_io`

use avatar3d::container::{decode, encode, Tensor, TensorMap, MAGIC};

fn main() -> avatar3d::Result<()> {
    let mut map = TensorMap::new();
    map.insert("weights.f32".into(), Tensor::f32(vec![2, 3], vec![0.5, -1.0, 2.0, 3.5, 0.0, 1e-7]));
    map.insert("grid.f64".into(), Tensor::f64(vec![4], vec![1.0, 2.0, 3.0, 4.0]));
    map.insert("mask.u8".into(), Tensor::u8(vec![3], vec![1, 0, 1]));

    let bytes = encode(&map);
    println!("{} tensors, {} bytes, magic {:?}", map.len(), bytes.len(), std::str::from_utf8(MAGIC).unwrap());
    let back = decode(&bytes)?;
    for (name, t) in &back {
        println!("{name:<12} shape {:?} values {:?}", t.shape(), t.to_f64_vec());
    }
    assert_eq!(back, map);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    println!("bad magic: {}", decode(&bad).unwrap_err());
    println!("truncated: {}", decode(&bytes[..bytes.len() / 2]).unwrap_err());
    Ok(())
}
