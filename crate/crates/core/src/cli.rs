//! Command-line front end. [`cli_dispatch`] parses `argv`, runs one
//! subcommand and returns the process exit code:
//! `0` success, `1` verification failure, `2` usage or input error.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::bench::{cost_summary, measure_latency, MIN_RUNS};
use crate::block::{init_weights, HprfbConfig, HprfbWeights, RfType};
use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, Payload};
use crate::error::{Error, Result};
use crate::gradcheck::{check_block, check_pipeline, BLOCK_TOL, PIPELINE_TOL};
use crate::metrics::{
    class_counts, evaluate, read_groups, read_predictions, reliability_diagram, subgroup_report,
    write_predictions, write_reliability_diagram, CalibrationConfig, Grouping, MetricReport,
};
use crate::reparam::{reparameterize, verify_merged, EquivalenceReport, MergedConv};
use crate::tensor::Real;
use crate::train::{run_demo, BnMode, DemoOptions, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "pyramid-rf", version, about = "Multi-branch pyramid receptive-field blocks and their merged convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Collapse a weights checkpoint into a merged-convolution checkpoint.
    Merge {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that the merged convolution reproduces the multi-branch block.
    Verify(VerifyArgs),
    /// Report parameter and MAC counts, optionally forward latency.
    Bench(BenchArgs),
    /// Evaluate a prediction CSV.
    Metrics(MetricsArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "3,5,7", value_parser = parse_scales)]
        scales: ScaleList,
        #[arg(long, default_value = "all", value_parser = parse_types)]
        types: TypeList,
    },
    /// Train the bar-orientation demo classifier.
    DemoTrain(DemoArgs),
}

#[derive(Debug, Args)]
struct BlockArgs {
    #[arg(long, default_value = "3,5,7", value_parser = parse_scales)]
    scales: ScaleList,
    #[arg(long, default_value = "all", value_parser = parse_types)]
    types: TypeList,
    /// Input and output channels.
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 1)]
    groups: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

impl BlockArgs {
    fn config(&self) -> Result<HprfbConfig> {
        HprfbConfig::new(
            self.scales.0.clone(),
            self.types.0.clone(),
            self.channels,
            self.channels,
            self.groups,
            self.stride,
        )
    }
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Weights checkpoint; without it a block is initialized from the
    /// config flags and `--seed`.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Merged checkpoint to check against instead of merging `--in` afresh.
    #[arg(long)]
    merged: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Max-abs tolerance; 1e-9 in 64-bit, 1e-4 with `--f32`.
    #[arg(long)]
    tol: Option<f64>,
    /// Run in 32-bit floats.
    #[arg(long)]
    f32: bool,
    /// Randomize batch-norm statistics and conv biases of an initialized block.
    #[arg(long)]
    random_bn: bool,
    #[command(flatten)]
    block: BlockArgs,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    block: BlockArgs,
    /// Image size as HxW.
    #[arg(long, default_value = "32x32", value_parser = parse_hw)]
    hw: (usize, usize),
    #[arg(long)]
    latency: bool,
    #[arg(long, default_value_t = MIN_RUNS)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[arg(long)]
    preds: PathBuf,
    /// One subgroup tag per line, in sample order.
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    bins: usize,
    /// Write reliability-diagram rows to this CSV.
    #[arg(long)]
    diagram: Option<PathBuf>,
    /// Also report head/tail subgroups, tail being the classes with fewer
    /// than this many samples.
    #[arg(long)]
    tail_below: Option<usize>,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Merge the trained block and compare both forms on the test split.
    #[arg(long)]
    merge_after: bool,
    /// Write test-set predictions as CSV.
    #[arg(long)]
    preds_out: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct ScaleList(Vec<usize>);

#[derive(Clone, Debug, PartialEq)]
struct TypeList(Vec<RfType>);

fn parse_scales(s: &str) -> std::result::Result<ScaleList, String> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<std::result::Result<_, _>>()
        .map(ScaleList)
}

fn parse_types(s: &str) -> std::result::Result<TypeList, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(TypeList(RfType::ALL.to_vec()));
    }
    s.split(',')
        .map(|t| t.trim().parse::<RfType>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()
        .map(TypeList)
}

fn parse_hw(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("`{s}` is not HxW"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(h)?, p(w)?))
}

/// Formats a metric value with at most six decimals, trailing zeros trimmed.
pub fn format_value(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

/// Runs the command line with the process's stdout and stderr.
pub fn cli_dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run(args, &mut io::stdout().lock(), &mut io::stderr().lock())
}

/// Like [`cli_dispatch`] with explicit output streams.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    match execute(cli.command, out) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILED,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Training { .. } | Error::Numeric(_) => EXIT_FAILED,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<bool> {
    match command {
        Command::Merge { input, out: path } => merge(&input, &path, out),
        Command::Verify(a) => verify(&a, out),
        Command::Bench(a) => bench(&a, out),
        Command::Metrics(a) => metrics(&a, out),
        Command::Gradcheck { seed, scales, types } => gradcheck(seed, scales.0, types.0, out),
        Command::DemoTrain(a) => demo(&a, out),
    }
}

fn merged_payload<T: Real>(w: &HprfbWeights<T>) -> Result<Payload<T>> {
    Ok(Payload::Merged {
        config: w.config().clone(),
        conv: reparameterize(w)?,
    })
}

fn merge(input: &PathBuf, path: &PathBuf, out: &mut dyn Write) -> Result<bool> {
    let merged = match read_checkpoint(input)? {
        Checkpoint::F32(Payload::Weights(w)) => Checkpoint::F32(merged_payload(&w)?),
        Checkpoint::F64(Payload::Weights(w)) => Checkpoint::F64(merged_payload(&w)?),
        _ => return Err(Error::config(format!("{} is already merged", input.display()))),
    };
    write_checkpoint(path, &merged)?;
    let k = merged.config().max_scale();
    writeln!(out, "merged {} branches into one {k}x{k} convolution -> {}", merged.config().branch_count(), path.display())?;
    Ok(true)
}

fn report_equivalence(r: &EquivalenceReport, precision: &str, out: &mut dyn Write) -> Result<bool> {
    writeln!(
        out,
        "{precision}: {} trials, max abs error {:.3e}, tol {:.0e} -> {}",
        r.trial_errors.len(),
        r.max_abs_err,
        r.tol,
        if r.passed { "PASS" } else { "FAIL" }
    )?;
    Ok(r.passed)
}

fn verify_at<T: Real>(w: &HprfbWeights<f64>, merged: Option<&MergedConv<f64>>, a: &VerifyArgs, tol: f64) -> Result<EquivalenceReport> {
    let w: HprfbWeights<T> = w.cast();
    let m = match merged {
        Some(m) => m.cast(),
        None => reparameterize(&w)?,
    };
    verify_merged(&w, &m, a.trials, a.seed, tol)
}

fn verify(a: &VerifyArgs, out: &mut dyn Write) -> Result<bool> {
    let weights: HprfbWeights<f64> = match &a.input {
        Some(path) => match read_checkpoint(path)? {
            Checkpoint::F64(Payload::Weights(w)) => w,
            Checkpoint::F32(Payload::Weights(w)) => w.cast(),
            _ => return Err(Error::config("--in must be a weights checkpoint")),
        },
        None => {
            let mut w = init_weights(&a.block.config()?, a.seed)?;
            if a.random_bn {
                w.randomize_bn(a.seed.wrapping_add(1));
            }
            w
        }
    };
    let merged = match &a.merged {
        Some(path) => match read_checkpoint(path)? {
            Checkpoint::F64(Payload::Merged { conv, .. }) => Some(conv),
            Checkpoint::F32(Payload::Merged { conv, .. }) => Some(conv.cast()),
            _ => return Err(Error::config("--merged must be a merged checkpoint")),
        },
        None => None,
    };
    if let Some(m) = &merged {
        let cfg = weights.config();
        let k = cfg.max_scale();
        let kd = m.kernel.dims();
        if kd.kh != k || kd.cout != cfg.out_channels || kd.cg != cfg.channels_per_group() || m.stride != cfg.stride || m.groups != cfg.groups {
            return Err(Error::config("merged checkpoint does not match the weights' configuration"));
        }
    }
    let cfg = weights.config();
    writeln!(
        out,
        "block: scales {:?}, {} types, {} -> {} channels, groups {}, stride {}",
        cfg.scales,
        cfg.rf_types.len(),
        cfg.in_channels,
        cfg.out_channels,
        cfg.groups,
        cfg.stride
    )?;
    if a.f32 {
        let r = verify_at::<f32>(&weights, merged.as_ref(), a, a.tol.unwrap_or(1e-4))?;
        report_equivalence(&r, "f32", out)
    } else {
        let r = verify_at::<f64>(&weights, merged.as_ref(), a, a.tol.unwrap_or(1e-9))?;
        report_equivalence(&r, "f64", out)
    }
}

fn bench(a: &BenchArgs, out: &mut dyn Write) -> Result<bool> {
    let config = a.block.config()?;
    let (h, w) = a.hw;
    write!(out, "{}", cost_summary(&config, h, w)?)?;
    if a.latency {
        let r = measure_latency(&config, h, w, a.runs, a.seed)?;
        write!(out, "{r}")?;
    }
    Ok(true)
}

fn write_report(out: &mut dyn Write, r: &MetricReport) -> io::Result<()> {
    writeln!(out, "ACC {}", format_value(r.acc))?;
    writeln!(out, "bACC {}", format_value(r.bacc))?;
    writeln!(out, "mF1 {}", format_value(r.mf1))?;
    match r.auc {
        Some(v) => writeln!(out, "AUC {}", format_value(v))?,
        None => writeln!(out, "AUC undefined")?,
    }
    writeln!(out, "ECE {}", format_value(r.ece))?;
    writeln!(out, "CECE {}", format_value(r.cece))?;
    writeln!(out, "Brier {}", format_value(r.brier))
}

fn metrics(a: &MetricsArgs, out: &mut dyn Write) -> Result<bool> {
    let cfg = CalibrationConfig::new(a.bins)?;
    let mut ps = read_predictions(BufReader::new(File::open(&a.preds)?))?;
    if let Some(path) = &a.groups {
        ps = ps.with_groups(read_groups(BufReader::new(File::open(path)?))?)?;
    }
    writeln!(out, "samples {}", ps.len())?;
    write_report(out, &evaluate(&ps, cfg)?)?;
    let mut groupings = Vec::new();
    if ps.groups().is_some() {
        groupings.push(Grouping::Tags);
    }
    if let Some(threshold) = a.tail_below {
        groupings.push(Grouping::HeadTail {
            class_counts: class_counts(&ps),
            threshold,
        });
    }
    for grouping in &groupings {
        for g in subgroup_report(&ps, grouping, cfg)? {
            writeln!(out, "\n[{}] samples {}", g.name, g.samples)?;
            match &g.report {
                Some(r) => write_report(out, r)?,
                None => writeln!(out, "empty subgroup, metrics omitted")?,
            }
        }
    }
    if let Some(path) = &a.diagram {
        let mut w = BufWriter::new(File::create(path)?);
        write_reliability_diagram(&mut w, &reliability_diagram(&ps, cfg))?;
        w.flush()?;
    }
    Ok(true)
}

fn gradcheck(seed: u64, scales: Vec<usize>, types: Vec<RfType>, out: &mut dyn Write) -> Result<bool> {
    let block_cfg = HprfbConfig::new(scales.clone(), types.clone(), 2, 2, 1, 1)?;
    let block = check_block(&block_cfg, seed)?;
    writeln!(out, "block (tol {BLOCK_TOL:.0e})\n{block}")?;
    let mut ok = block.passed(BLOCK_TOL);
    let pipe_cfg = HprfbConfig::new(scales, types, 1, 2, 1, 1)?;
    for (mode, label) in [(BnMode::Batch, "batch statistics"), (BnMode::Frozen, "frozen statistics")] {
        let r = check_pipeline(&pipe_cfg, mode, seed)?;
        writeln!(out, "pipeline, {label} (tol {PIPELINE_TOL:.0e})\n{r}")?;
        ok &= r.passed(PIPELINE_TOL);
    }
    writeln!(out, "{}", if ok { "PASS" } else { "FAIL" })?;
    Ok(ok)
}

fn demo(a: &DemoArgs, out: &mut dyn Write) -> Result<bool> {
    let opts = DemoOptions {
        samples: a.samples,
        noise: a.noise,
        merge_after: a.merge_after,
        train: TrainConfig {
            epochs: a.epochs,
            seed: a.seed,
            ..TrainConfig::default()
        },
        ..DemoOptions::default()
    };
    let report = run_demo(&opts)?;
    write!(out, "{report}")?;
    if let Some(path) = &a.preds_out {
        let mut w = BufWriter::new(File::create(path)?);
        write_predictions(&mut w, &report.predictions)?;
        w.flush()?;
        writeln!(out, "predictions written to {}", path.display())?;
    }
    Ok(report.merge.as_ref().is_none_or(|m| m.passed()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("pyramid-rf").chain(args.iter().copied()), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn value_formatting() {
        assert_eq!(format_value(0.1125), "0.1125");
        assert_eq!(format_value(0.11249999999), "0.1125");
        assert_eq!(format_value(1.0), "1");
        assert_eq!(format_value(0.0), "0");
        assert_eq!(format_value(-1e-12), "0");
    }

    #[test]
    fn list_parsers() {
        assert_eq!(parse_scales("3, 5,7").unwrap().0, vec![3, 5, 7]);
        assert_eq!(parse_types("all").unwrap().0, RfType::ALL.to_vec());
        assert_eq!(parse_types("vc,S").unwrap().0, vec![RfType::VerticalCoord, RfType::Square]);
        assert!(parse_types("XX").is_err());
        assert_eq!(parse_hw("8x16").unwrap(), (8, 16));
        assert!(parse_hw("8").is_err());
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let (code, out, err) = run_capture(&["verify", "--bogus"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(out.is_empty());
        assert!(err.contains("--bogus"));
    }

    #[test]
    fn help_goes_to_stdout() {
        let (code, out, _) = run_capture(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("demo-train"));
    }

    #[test]
    fn verify_default_config() {
        let (code, out, _) = run_capture(&["verify", "--trials", "2"]);
        assert_eq!(code, EXIT_OK, "{out}");
        assert!(out.contains("PASS"));
    }

    #[test]
    fn invalid_config_is_usage_error() {
        let (code, _, err) = run_capture(&["verify", "--scales", "4"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("scale 4"));
    }
}
