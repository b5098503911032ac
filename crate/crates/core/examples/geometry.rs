//! Patch size and center of an ROI from warped template labels, and
//! training-center sampling on a target.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use atlasforge::geometry::{roi_cuboid, roi_patch_size, sample_training_centers, CenterPool, DEFAULT_DILATION_RADIUS};
use atlasforge::synthetic::{generate, SyntheticConfig};

fn main() -> atlasforge::Result<()> {
    let data = generate(&SyntheticConfig::default())?;
    let labels: Vec<_> = data.templates.iter().map(|s| &s.label).collect();
    for roi in 1..=2 {
        let cuboid = roi_cuboid(&labels, roi, DEFAULT_DILATION_RADIUS)?;
        let size = roi_patch_size(&[cuboid])?;
        println!("ROI {roi}: cuboid at {:?} size {:?}, center {:?}", cuboid.min, size, cuboid.center());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let centers = sample_training_centers(&data.targets[0].label, roi, size, 100, DEFAULT_DILATION_RADIUS, &mut rng)?;
        let n = |pool| centers.iter().filter(|c| c.pool == pool).count();
        println!(
            "  100 centers: {} interior, {} boundary, {} grid",
            n(CenterPool::Interior),
            n(CenterPool::Boundary),
            n(CenterPool::Grid)
        );
    }
    Ok(())
}
