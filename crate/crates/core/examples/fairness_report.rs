//! Metric suite on a hand-built three-class prediction set with two
//! demographic subgroups, plus a reliability diagram.

use pyramid_rf::metrics::{
    evaluate, reliability_diagram, subgroup_report, CalibrationConfig, Grouping, PredictionSet,
};

fn main() -> pyramid_rf::Result<()> {
    let rows = vec![
        vec![0.7, 0.2, 0.1],
        vec![0.6, 0.3, 0.1],
        vec![0.2, 0.7, 0.1],
        vec![0.3, 0.4, 0.3],
        vec![0.1, 0.2, 0.7],
        vec![0.5, 0.1, 0.4],
        vec![0.2, 0.6, 0.2],
        vec![0.1, 0.1, 0.8],
    ];
    let labels = vec![0, 1, 1, 2, 2, 2, 1, 2];
    let tags = ["a", "a", "a", "a", "b", "b", "b", "b"].map(|t| Some(t.to_string())).to_vec();
    let ps = PredictionSet::new(rows, labels)?.with_groups(tags)?;

    let cfg = CalibrationConfig::new(5)?;
    let m = evaluate(&ps, cfg)?;
    let auc = m.auc.map_or("undefined".to_string(), |a| format!("{a:.3}"));
    println!(
        "all: ACC {:.3} bACC {:.3} mF1 {:.3} AUC {auc} ECE {:.3} CECE {:.3} Brier {:.3}",
        m.acc, m.bacc, m.mf1, m.ece, m.cece, m.brier
    );

    for g in subgroup_report(&ps, &Grouping::Tags, cfg)? {
        if let Some(m) = g.report {
            println!("[{}] n={} ACC {:.3} ECE {:.3} Brier {:.3}", g.name, g.samples, m.acc, m.ece, m.brier);
        }
    }

    println!("reliability diagram:");
    for b in reliability_diagram(&ps, cfg) {
        println!("  ({:.1}, {:.1}]  n={}  acc {:.2}  conf {:.2}", b.lo, b.hi, b.count, b.accuracy, b.confidence);
    }
    Ok(())
}
