//! Retrieval of the K most similar template patches around a target center.

use atlasforge::geometry::{roi_cuboid, roi_patch_size, DEFAULT_DILATION_RADIUS};
use atlasforge::patchsearch::{build_input, AtlasRef, SearchConfig};
use atlasforge::synthetic::{generate, SyntheticConfig};

fn main() -> atlasforge::Result<()> {
    let data = generate(&SyntheticConfig::default())?;
    let labels: Vec<_> = data.templates.iter().map(|s| &s.label).collect();
    let cuboid = roi_cuboid(&labels, 1, DEFAULT_DILATION_RADIUS)?;
    let size = roi_patch_size(&[cuboid])?;
    let atlases: Vec<AtlasRef> = data
        .templates
        .iter()
        .map(|s| AtlasRef { image: &s.image, label: &s.label })
        .collect();
    let cfg = SearchConfig { k: 2, ..SearchConfig::default() };
    let (input, results) = build_input(&data.targets[0].image, 1, cuboid.center(), size, &atlases, &cfg)?;
    println!("query patch {:?}, radius {:?}", input.patch_size(), cfg.radius_for(size));
    for r in &results {
        let fg = r.label_patch.data.iter().filter(|&&v| v > 0.5).count();
        println!("template {}: offset {:?}, SSD {:.1}, {fg} ROI voxels", r.template_id, r.offset, r.distance);
    }
    Ok(())
}
