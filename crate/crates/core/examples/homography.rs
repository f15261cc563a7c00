//! Recovers a homography from matches with half of them corrupted, and
//! scores the estimate with the corner error.

use densematch::geometry::{
    apply_homography, mean_corner_error, ransac_homography, sample_grid, GridSpec, Homography,
    PointSet, RansacConfig,
};
use nalgebra::Point2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> densematch::Result<()> {
    let h = Homography::from_rows([[1.05, 0.08, 6.0], [-0.04, 0.97, -3.0], [2e-4, -1e-4, 1.0]])?;
    let grid = GridSpec {
        rows: 10,
        cols: 10,
        width: 256,
        height: 256,
        noise_amplitude: 0.25,
        seed: 1,
    };
    let src = sample_grid(&grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dst: PointSet = apply_homography(&h, &src)?
        .iter()
        .enumerate()
        .map(|(i, p)| if i % 2 == 0 { *p } else { Point2::new(rng.gen_range(0.0..256.0), rng.gen_range(0.0..256.0)) })
        .collect();

    let fit = ransac_homography(&src, &dst, &RansacConfig::default())?;
    println!(
        "{} of {} matches kept after {} iterations",
        fit.inlier_count(),
        src.len(),
        fit.iterations
    );
    println!("corner error {:.2e} px", mean_corner_error(&h, &fit.homography, 256, 256)?);
    Ok(())
}
