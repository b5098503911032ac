//! The file-based pipeline on a generated dataset, stage by stage, as the
//! `atlasforge` binary runs it.
//!
//! `cargo run --release --example pipeline -- [out_dir] [samples_per_roi] [max_epochs]`

use std::path::PathBuf;
use std::time::Instant;

use atlasforge::pipeline::{
    evaluate_files, geometry, prep, sample, segment, train, PrepOptions, SampleOptions, SegmentOptions, TrainOptions,
};
use atlasforge::sfcn::TrainConfig;
use atlasforge::synthetic::{generate, write_dataset, SyntheticConfig};

fn main() -> atlasforge::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("pipeline-run", String::as_str));
    let count = args.get(1).map_or(60, |s| s.parse().expect("sample count"));
    let max_epochs = args.get(2).map_or(8, |s| s.parse().expect("epoch count"));
    let start = Instant::now();

    let dataset = generate(&SyntheticConfig::default())?;
    let manifest = write_dataset(&dataset, &out.join("data"))?;
    let prepared = prep(&PrepOptions { manifest, out: out.join("prep"), reference: None })?;
    let geo_path = out.join("geo.json");
    let geo = geometry(&prepared, 3, &geo_path)?;
    for r in &geo.rois {
        println!("ROI {}: patch {:?}", r.roi, r.size);
    }
    for r in &geo.rois {
        let mut s = SampleOptions::new(prepared.clone(), geo_path.clone(), r.roi, out.join("samples"));
        s.count = count;
        s.seed = 1;
        sample(&s)?;
        let mut t = TrainOptions::new(out.join("samples"), r.roi, out.join("models"));
        t.members = 2;
        t.width = Some(0.25);
        t.seed = 1;
        t.config = TrainConfig { max_epochs, ..TrainConfig::default() };
        let index = train(&t)?;
        println!("ROI {} trained after {:.0}s: {:?}", r.roi, start.elapsed().as_secs_f64(), index.rois[&r.roi].iter().map(|m| m.best_epoch).collect::<Vec<_>>());
    }
    for j in 0..dataset.tests.len() {
        let seg = out.join(format!("seg{j}.rvol"));
        segment(&SegmentOptions {
            image: out.join(format!("data/test{j}_image.rvol")),
            models: out.join("models"),
            out: seg.clone(),
            confidence: Some(out.join(format!("conf{j}.rvol"))),
        })?;
        let report = evaluate_files(&seg, &out.join(format!("data/test{j}_label.rvol")), &[1, 2], Some(&out.join(format!("report{j}.json"))))?;
        let dsc: Vec<String> = report.per_roi.iter().map(|(r, s)| format!("ROI {r} {:.3}", s.mean)).collect();
        println!("test {j}: {}, all {:.3}", dsc.join(", "), report.all_labels.mean);
    }
    println!("done in {:.0}s, artifacts in {}", start.elapsed().as_secs_f64(), out.display());
    Ok(())
}
