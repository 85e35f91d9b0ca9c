//! Trains the bar-orientation classifier, merges its block and writes the
//! test-set predictions as CSV.
//!
//! cargo run --example train_demo -- [epochs] [seed] [preds.csv]

use std::fs::File;
use std::io::BufWriter;

use pyramid_rf::metrics::{evaluate, write_predictions, CalibrationConfig};
use pyramid_rf::train::{run_demo, DemoOptions, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs = args.first().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let seed = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(7);
    let opts = DemoOptions {
        train: TrainConfig { epochs, seed, ..TrainConfig::default() },
        ..DemoOptions::default()
    };
    let report = run_demo(&opts)?;
    print!("{report}");

    let m = evaluate(&report.predictions, CalibrationConfig::default())?;
    println!("ACC {:.4}  ECE {:.4}  Brier {:.4}", m.acc, m.ece, m.brier);
    if let Some(path) = args.get(2) {
        write_predictions(BufWriter::new(File::create(path)?), &report.predictions)?;
        println!("predictions written to {path}");
    }
    Ok(())
}
