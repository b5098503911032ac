//! Trains one S-FCN on ROI 1 of a synthetic dataset with early stopping.
//!
//! `cargo run --release --example train_sfcn -- [samples] [max_epochs]`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use atlasforge::geometry::{roi_cuboid, roi_patch_size, sample_training_centers, DEFAULT_DILATION_RADIUS};
use atlasforge::patchsearch::{build_training_sample, AtlasRef, SearchConfig};
use atlasforge::sfcn::{train_sfcn, Sfcn, SfcnSpec, TrainConfig};
use atlasforge::synthetic::{generate, SyntheticConfig};

fn main() -> atlasforge::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("numeric argument"));
    let count = args.next().unwrap_or(60);
    let max_epochs = args.next().unwrap_or(6);

    let data = generate(&SyntheticConfig::default())?;
    let atlases: Vec<AtlasRef> = data.templates.iter().map(|s| AtlasRef { image: &s.image, label: &s.label }).collect();
    let labels: Vec<_> = data.templates.iter().map(|s| &s.label).collect();
    let size = roi_patch_size(&[roi_cuboid(&labels, 1, DEFAULT_DILATION_RADIUS)?])?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut samples = Vec::new();
    for t in &data.targets {
        for c in sample_training_centers(&t.label, 1, size, count / data.targets.len(), DEFAULT_DILATION_RADIUS, &mut rng)? {
            samples.push(build_training_sample(&t.image, &t.label, 1, c.center, size, &atlases, &SearchConfig::default())?.0);
        }
    }
    let val = samples.split_off(samples.len() * 4 / 5);
    println!("{} training / {} validation patches of {size:?}", samples.len(), val.len());

    let net = Sfcn::new(SfcnSpec::new(3, size).with_width(0.25), &mut rng)?;
    println!("{} parameters", net.parameter_count());
    let cfg = TrainConfig { max_epochs, ..TrainConfig::default() };
    let trained = train_sfcn(net, &samples, &val, &cfg)?;
    for e in &trained.history {
        println!("epoch {:2}: loss {:.4}, validation DSC {:.4}", e.epoch, e.loss, e.val_dsc);
    }
    println!("kept epoch {} of {}", trained.best_epoch, trained.stopped_epoch);
    Ok(())
}
