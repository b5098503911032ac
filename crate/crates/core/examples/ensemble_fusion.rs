//! Per-ROI ensembles predicting at the geometry centers of a test volume,
//! fused into one label map and scored.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use atlasforge::ensemble::{predict_roi, train_mfcn, EnsembleSpec};
use atlasforge::eval::evaluate;
use atlasforge::fusion::fuse;
use atlasforge::geometry::{roi_cuboid, roi_patch_size, sample_training_centers};
use atlasforge::patchsearch::{build_input, build_training_sample, AtlasRef, SearchConfig};
use atlasforge::sfcn::{SfcnSpec, TrainConfig};
use atlasforge::synthetic::{generate, SyntheticConfig};

fn main() -> atlasforge::Result<()> {
    let data = generate(&SyntheticConfig::default())?;
    let atlases: Vec<AtlasRef> = data.templates.iter().map(|s| AtlasRef { image: &s.image, label: &s.label }).collect();
    let labels: Vec<_> = data.templates.iter().map(|s| &s.label).collect();
    let search = SearchConfig::default();
    let test = &data.tests[0];
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let mut predictions = Vec::new();
    let mut members = BTreeMap::new();
    for roi in 1..=2 {
        let cuboid = roi_cuboid(&labels, roi, 3)?;
        let size = roi_patch_size(&[cuboid])?;
        let mut samples = Vec::new();
        for t in &data.targets {
            for c in sample_training_centers(&t.label, roi, size, 16, 3, &mut rng)? {
                samples.push(build_training_sample(&t.image, &t.label, roi, c.center, size, &atlases, &search)?.0);
            }
        }
        let val = samples.split_off(40);
        let cfg = TrainConfig { max_epochs: 6, ..TrainConfig::default() };
        let trained = train_mfcn(&SfcnSpec::new(3, size), &samples, &val, &EnsembleSpec::uniform(2, 0.25, roi as u64), &cfg)?;
        let nets: Vec<_> = trained.iter().map(|t| &t.network).collect();
        let (input, _) = build_input(&test.image, roi, cuboid.center(), size, &atlases, &search)?;
        predictions.push(predict_roi(&nets, &input, roi, cuboid.center())?);
        members.insert(roi, trained.len());
    }
    let fused = fuse(&predictions, test.image.dims())?;
    let report = evaluate(&fused.labels, &test.label, &[1, 2])?;
    println!("members per ROI: {members:?}");
    for (roi, s) in &report.per_roi {
        println!("ROI {roi}: DSC {:.4}", s.mean);
    }
    println!("all labels: {:.4}", report.all_labels.mean);
    Ok(())
}
