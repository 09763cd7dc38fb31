//! Writes an oblique volume, a mask and a displacement field as MetaImage
//! files and reads them back.
//!
//! cargo run --release --example metaimage -- [out_dir]

use std::path::PathBuf;

use edtreg::io::{read_field, read_volume, write_field, write_mask, write_volume, Image};
use edtreg::{DeformationField, Grid, Mask3D, Vec3, Volume3D};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().display().to_string()));
    std::fs::create_dir_all(&out)?;
    let rot = nalgebra::Rotation3::from_euler_angles(0.1, 0.2, -0.3).into_inner();
    let grid = Grid::new([20, 16, 12], [0.9, 0.9, 2.5], Vec3::new(-9.0, -7.0, 12.0), rot)?;

    let vol = Volume3D::from_fn(grid.clone(), |p| (p.x * 0.3).sin() + p.z * 0.01);
    let mask = Mask3D::new(grid.clone(), vol.data().iter().map(|&v| v > 0.5).collect())?;
    let field = DeformationField::from_fn(grid, |p| Vec3::new(0.0, 0.1 * p.x, -0.05 * p.y));

    write_volume(&vol, out.join("demo_volume.mhd"))?;
    write_mask(&mask, out.join("demo_mask.mhd"))?;
    write_field(&field, out.join("demo_field.mhd"))?;

    let v2 = read_volume(out.join("demo_volume.mhd"))?;
    let m2 = read_volume(out.join("demo_mask.mhd"))?;
    let f2 = read_field(out.join("demo_field.mhd"))?;
    println!("volume roundtrip exact: {}", v2 == Image::Volume(vol));
    println!("mask roundtrip exact:   {}", m2 == Image::Mask(mask));
    // components are stored as 32-bit floats
    let diff = f2.as_slice().iter().zip(field.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("field roundtrip max |du| {diff:.1e} mm");
    println!("files in {}", out.display());
    Ok(())
}
