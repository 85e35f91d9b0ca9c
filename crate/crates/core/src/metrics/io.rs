//! Prediction CSV ingestion and reliability-diagram export.
//!
//! Prediction files start with the header `p0,p1,...,p{C-1},label[,group]`
//! followed by one sample per line.

use std::io::{BufRead, Write};

use super::{PredictionSet, ReliabilityBin};
use crate::error::{Error, Result};

pub fn read_predictions(reader: impl BufRead) -> Result<PredictionSet> {
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, line)) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
            None => return Err(Error::parse("line 1", "missing header")),
        }
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let has_group = cols.last() == Some(&"group");
    let label_col = if has_group { cols.len() - 2 } else { cols.len() - 1 };
    if cols.get(label_col) != Some(&"label") || label_col == 0 {
        return Err(Error::parse(
            "line 1",
            "header must be p0,...,p{C-1},label[,group]",
        ));
    }
    for (c, name) in cols[..label_col].iter().enumerate() {
        if *name != format!("p{c}") {
            return Err(Error::parse(
                "line 1",
                format!("column {c} is `{name}`, expected `p{c}`"),
            ));
        }
    }

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = format!("line {}", i + 1);
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::parse(
                at,
                format!("{} fields, header has {}", fields.len(), cols.len()),
            ));
        }
        let row = fields[..label_col]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::parse(at.clone(), format!("probability `{f}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let label = fields[label_col]
            .parse::<usize>()
            .map_err(|e| Error::parse(at.clone(), format!("label `{}`: {e}", fields[label_col])))?;
        rows.push(row);
        labels.push(label);
        if has_group {
            groups.push(parse_tag(fields[label_col + 1]));
        }
    }
    let ps = PredictionSet::new(rows, labels)?;
    if has_group {
        ps.with_groups(groups)
    } else {
        Ok(ps)
    }
}

fn parse_tag(field: &str) -> Option<String> {
    let t = field.trim();
    (!t.is_empty() && t != "-").then(|| t.to_string())
}

/// One subgroup tag per line, in sample order; blank or `-` excludes the
/// sample.
pub fn read_groups(reader: impl BufRead) -> Result<Vec<Option<String>>> {
    reader
        .lines()
        .map(|l| Ok(parse_tag(&l?)))
        .collect()
}

pub fn write_predictions(mut out: impl Write, ps: &PredictionSet) -> Result<()> {
    let header: Vec<String> = (0..ps.classes()).map(|c| format!("p{c}")).collect();
    let groups = ps.groups();
    write!(out, "{},label", header.join(","))?;
    if groups.is_some() {
        write!(out, ",group")?;
    }
    writeln!(out)?;
    for s in 0..ps.len() {
        let row: Vec<String> = ps.row(s).iter().map(|p| p.to_string()).collect();
        write!(out, "{},{}", row.join(","), ps.labels()[s])?;
        if let Some(g) = groups {
            write!(out, ",{}", g[s].as_deref().unwrap_or("-"))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// `bin_lo,bin_hi,count,accuracy,confidence` rows.
pub fn write_reliability_diagram(mut out: impl Write, bins: &[ReliabilityBin]) -> Result<()> {
    writeln!(out, "bin_lo,bin_hi,count,accuracy,confidence")?;
    for b in bins {
        writeln!(
            out,
            "{},{},{},{},{}",
            b.lo, b.hi, b.count, b.accuracy, b.confidence
        )?;
    }
    Ok(())
}
