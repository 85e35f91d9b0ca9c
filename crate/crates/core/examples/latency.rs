//! Median single-image latency of the multi-branch and merged forms.
//!
//! cargo run --release --example latency -- [runs]

use pyramid_rf::bench::{measure_latency, MIN_RUNS};
use pyramid_rf::HprfbConfig;

fn main() -> pyramid_rf::Result<()> {
    let runs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(MIN_RUNS);
    for side in [16, 32, 64] {
        let r = measure_latency(&HprfbConfig::default(), side, side, runs, 0)?;
        print!("{side}x{side}: {r}");
    }
    Ok(())
}
