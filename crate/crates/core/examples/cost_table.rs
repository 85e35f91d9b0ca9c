//! Parameter and MAC counts of the multi-branch and merged forms for a few
//! block configurations.

use pyramid_rf::bench::cost_summary;
use pyramid_rf::{HprfbConfig, RfType};

fn main() -> pyramid_rf::Result<()> {
    use RfType::*;
    let configs = [
        ("3,5,7 all types, 1 channel", HprfbConfig::new(vec![3, 5, 7], RfType::ALL.to_vec(), 1, 1, 1, 1)?),
        ("3,5,7 all types, 16 channels", HprfbConfig::new(vec![3, 5, 7], RfType::ALL.to_vec(), 16, 16, 1, 1)?),
        ("3,5,7 depthwise, 16 channels", HprfbConfig::new(vec![3, 5, 7], RfType::ALL.to_vec(), 16, 16, 16, 1)?),
        ("3,5,7,9 lines only", HprfbConfig::new(vec![3, 5, 7, 9], vec![VerticalCoord, HorizontalCoord], 16, 16, 1, 1)?),
        ("3 square, stride 2", HprfbConfig::new(vec![3], vec![Square], 16, 32, 1, 2)?),
    ];
    for (name, cfg) in &configs {
        println!("{name} @ 32x32");
        print!("{}", cost_summary(cfg, 32, 32)?);
        println!();
    }
    Ok(())
}
