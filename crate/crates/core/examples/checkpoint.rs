//! Writes a block checkpoint, merges it, writes the merged form and reads
//! both back.

use pyramid_rf::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, Payload};
use pyramid_rf::{init_weights, reparameterize, HprfbConfig, HprfbWeights};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("pyramid-rf-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let weights_path = dir.join("block.ckpt");
    let merged_path = dir.join("block.merged.ckpt");

    let config = HprfbConfig::default();
    let w: HprfbWeights<f32> = init_weights(&config, 11)?;
    write_checkpoint(&weights_path, &Checkpoint::from(w.clone()))?;

    let loaded = read_checkpoint(&weights_path)?;
    let Checkpoint::F32(Payload::Weights(w2)) = &loaded else {
        return Err("unexpected checkpoint payload".into());
    };
    assert_eq!(w2, &w);
    let merged = Checkpoint::F32(Payload::Merged { config: config.clone(), conv: reparameterize(w2)? });
    write_checkpoint(&merged_path, &merged)?;

    for p in [&weights_path, &merged_path] {
        let c = read_checkpoint(p)?;
        println!(
            "{}: {} bytes, {:?}, {}, scales {:?}",
            p.file_name().unwrap().to_string_lossy(),
            std::fs::metadata(p)?.len(),
            c.dtype(),
            if c.is_merged() { "merged" } else { "multi-branch" },
            c.config().scales
        );
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
