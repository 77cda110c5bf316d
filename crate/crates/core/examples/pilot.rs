//! Desk-scale learning run: 200 spheres, one network per band, clean and
//! noisy held-out evaluation.
//!
//! ```text
//! cargo run --release -p asf-core --example pilot -- OUT_DIR [EPOCHS [LR [INPUT_POINTS [BANDS]]]]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use asf_core::oracle::{gen_dataset, Dataset, DatasetConfig};
use asf_core::train::{evaluate, split_dataset, train_model, TrainConfig, TrainOutputs};
use asf_core::BANDS_HZ;

fn main() -> asf_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "pilot".into()));
    let epochs: usize = args.next().map_or(100, |s| s.parse().expect("epoch count"));
    let lr: f64 = args.next().map_or(1e-3, |s| s.parse().expect("learning rate"));
    let input_points: usize = args.next().map_or(512, |s| s.parse().expect("input points"));
    let bands: Vec<u32> = args.next().map_or(BANDS_HZ.to_vec(), |s| {
        s.split(',').map(|b| b.parse().expect("band")).collect()
    });
    let start = Instant::now();
    let radii = (0..20).map(|i| 0.5 + 0.5 * i as f64 / 19.0).collect();
    let cfg = DatasetConfig {
        radii,
        seeds: 10,
        seed: 7,
        ..Default::default()
    };
    let data_dir = out.join("data");
    gen_dataset(&cfg, &data_dir)?;
    let ds = Dataset::load(&data_dir)?;
    let ids: Vec<String> = ds.examples.iter().map(|e| e.id.clone()).collect();
    let split = split_dataset(&ids, 7)?;
    println!("dataset: {} examples, {:.1} s", ds.len(), start.elapsed().as_secs_f64());
    println!("band_hz\tepochs\tbest_val_loss\tclean_db\tnoisy_db\tseconds");
    for band in bands {
        let t = Instant::now();
        let mut tc = TrainConfig::new(band);
        tc.epochs = epochs;
        tc.seed = 7;
        tc.learning_rate0 = lr;
        tc.input_points = input_points;
        let outputs = TrainOutputs {
            checkpoint: out.join(format!("m{band}.ckpt")),
            log: out.join(format!("train_{band}.tsv")),
            state: None,
            resume: false,
            header: vec![],
        };
        let report = train_model(&tc, &ds, &split, &outputs)?;
        let clean = evaluate(&report.best, &ds, &split.test, 0.0, 7)?;
        let noisy = evaluate(&report.best, &ds, &split.test, 0.05, 7)?;
        println!(
            "{band}\t{epochs}\t{:.3e}\t{:.3}\t{:.3}\t{:.0}",
            report.best_val_loss,
            clean.mean_db_error,
            noisy.mean_db_error,
            t.elapsed().as_secs_f64()
        );
    }
    println!("total {:.0} s", start.elapsed().as_secs_f64());
    Ok(())
}
