//! Loss-histogram export from per-epoch divider dumps.
//!
//! The dump format is `sample_id,loss,p_clean,is_truly_clean` with losses
//! already min-max normalised; the export bins the losses over [0,1] into
//! two aligned histograms, truly-clean and truly-noisy.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::{runtime, CliError};

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub clean: u64,
    pub noisy: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramTable {
    pub bins: Vec<HistogramBin>,
}

impl HistogramTable {
    /// Shared mass of the two normalised histograms; 0 means disjoint, 1
    /// identical.
    pub fn overlap_coefficient(&self) -> f64 {
        let clean_total: u64 = self.bins.iter().map(|b| b.clean).sum();
        let noisy_total: u64 = self.bins.iter().map(|b| b.noisy).sum();
        if clean_total == 0 || noisy_total == 0 {
            return 0.0;
        }
        self.bins
            .iter()
            .map(|b| {
                (b.clean as f64 / clean_total as f64).min(b.noisy as f64 / noisy_total as f64)
            })
            .sum()
    }
}

/// Reads a divider dump and bins it.
pub fn export_histogram(dump_path: impl AsRef<Path>, bins: usize) -> Result<HistogramTable, CliError> {
    if bins == 0 {
        return Err(CliError::Validation("bins must be >= 1".into()));
    }
    let path = dump_path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Validation("dump file is empty".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let expected = ["sample_id", "loss", "p_clean", "is_truly_clean"];
    if cols != expected {
        return Err(CliError::Validation(format!(
            "dump header must be `{}`, found `{header}`",
            expected.join(",")
        )));
    }
    let mut table = HistogramTable {
        bins: (0..bins)
            .map(|b| HistogramBin {
                lo: b as f64 / bins as f64,
                hi: (b + 1) as f64 / bins as f64,
                clean: 0,
                noisy: 0,
            })
            .collect(),
    };
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(CliError::Validation(format!(
                "dump line {}: expected 4 fields",
                idx + 2
            )));
        }
        let loss: f64 = fields[1]
            .parse()
            .map_err(|_| CliError::Validation(format!("dump line {}: bad loss", idx + 2)))?;
        let clean = match fields[3] {
            "1" => true,
            "0" => false,
            other => {
                return Err(CliError::Validation(format!(
                    "dump line {}: bad is_truly_clean `{other}`",
                    idx + 2
                )))
            }
        };
        let bin = ((loss * bins as f64) as usize).min(bins - 1);
        if clean {
            table.bins[bin].clean += 1;
        } else {
            table.bins[bin].noisy += 1;
        }
    }
    Ok(table)
}

pub fn write_histogram_csv(table: &HistogramTable, path: impl AsRef<Path>) -> Result<(), CliError> {
    let mut out = String::from("bin_lo,bin_hi,clean_count,noisy_count\n");
    for b in &table.bins {
        let _ = writeln!(out, "{},{},{},{}", b.lo, b.hi, b.clean, b.noisy);
    }
    fs::write(path.as_ref(), out).map_err(runtime)
}
