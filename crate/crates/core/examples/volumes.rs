//! RVOL round trip, histogram matching and warping with a displacement field.

use atlasforge::synthetic::{generate, SyntheticConfig};
use atlasforge::volume::{
    apply_transform, histogram_match, load_volume, save_volume, DisplacementField, Interpolation, Transform,
};

fn main() -> atlasforge::Result<()> {
    let data = generate(&SyntheticConfig::default())?;
    let (reference, moving) = (&data.templates[0], &data.targets[0]);

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("target.rvol");
    save_volume(&moving.image, &path)?;
    assert_eq!(load_volume(&path)?, moving.image);
    println!("wrote {} bytes for {:?}", std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0), moving.image.dims());

    let matched = histogram_match(&moving.image, &reference.image)?;
    let mean = |v: &atlasforge::volume::Volume| {
        let d = v.as_f32().unwrap();
        d.iter().sum::<f32>() / d.len() as f32
    };
    println!("mean intensity {:.2} -> {:.2} (reference {:.2})", mean(&moving.image), mean(&matched), mean(&reference.image));

    let shift = DisplacementField::translation(moving.label.dims(), [2.0, 0.0, 0.0])?;
    let warped = apply_transform(&moving.label, Transform::Field(&shift), Interpolation::Nearest)?;
    let count = |v: &atlasforge::volume::Volume, roi| v.as_labels().unwrap().iter().filter(|&&l| l == roi).count();
    println!("ROI 1 voxels before/after a 2-voxel shift: {} / {}", count(&moving.label, 1), count(&warped, 1));
    Ok(())
}
