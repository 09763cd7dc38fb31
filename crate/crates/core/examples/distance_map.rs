//! Distance map of a hollow sphere on an anisotropic grid, in all three modes.
//!
//! cargo run --release --example distance_map

use edtreg::{edt3, EdtMode, Grid, Mask3D, Vec3};

fn main() -> edtreg::Result<()> {
    let grid = Grid::axis_aligned([48, 48, 24], [0.8, 0.8, 1.6], Vec3::zeros())?;
    let c = grid.center();
    // shell between radii 8 and 14 mm
    let data = (0..grid.len())
        .map(|i| {
            let r = (grid.voxel_center(i) - c).norm();
            (8.0..=14.0).contains(&r)
        })
        .collect();
    let mask = Mask3D::new(grid.clone(), data)?;
    println!("foreground {:.1} %", 100.0 * mask.foreground_fraction());

    for mode in [EdtMode::Interior, EdtMode::Exterior, EdtMode::Signed] {
        let map = edt3(&mask, mode)?;
        let (lo, hi) = map.volume.range();
        // profile along x through the centre
        let [nx, ny, nz] = grid.dims();
        let row: Vec<String> = (0..nx).step_by(4).map(|i| format!("{:.1}", map.volume.get(i, ny / 2, nz / 2))).collect();
        println!("{mode:?}: range [{lo:.2}, {hi:.2}] mm");
        println!("  x-profile {}", row.join(" "));
    }
    Ok(())
}
