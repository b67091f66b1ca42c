//! Recovery histograms, per-subset statistics and merged learning curves.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::pipeline::CurvePoint;
use crate::error::{Error, Result};
use crate::scheduler::CurriculumPartition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Bins of width `width` from `floor(min / width) * width` up to the maximum.
/// Values equal to the upper edge of the last bin fall into it.
pub fn histogram(values: &[f64], width: f64) -> Result<Vec<HistogramBin>> {
    if values.is_empty() {
        return Err(Error::Argument("histogram of no values".into()));
    }
    if !(width > 0.0 && width.is_finite()) || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("histogram needs finite values and a positive width".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = (min / width).floor() * width;
    let n_bins = (((max - start) / width).ceil() as usize).max(1);
    let mut bins: Vec<HistogramBin> = (0..n_bins)
        .map(|i| HistogramBin {
            lo: start + i as f64 * width,
            hi: start + (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for &v in values {
        let i = (((v - start) / width).floor() as usize).min(n_bins - 1);
        bins[i].count += 1;
    }
    Ok(bins)
}

pub fn histogram_csv(bins: &[HistogramBin], total: usize) -> String {
    let mut out = String::from("bin_lo,bin_hi,count,fraction\n");
    for b in bins {
        out.push_str(&format!("{},{},{},{}\n", b.lo, b.hi, b.count, b.count as f64 / total as f64));
    }
    out
}

/// Share of `values` strictly below `threshold`.
pub fn fraction_below(values: &[f64], threshold: f64) -> f64 {
    values.iter().filter(|&&v| v < threshold).count() as f64 / values.len().max(1) as f64
}

/// Recovery-degree range of one subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    /// 1-based subset index.
    pub subset: usize,
    pub size: usize,
    pub min_bleu: f64,
    pub max_bleu: f64,
    pub mean_bleu: f64,
    /// Share of examples flagged as corrupted, when flags are known.
    pub corrupted_fraction: Option<f64>,
}

/// `bleu` is indexed by example id.
pub fn partition_stats(
    partition: &CurriculumPartition,
    bleu: &[f64],
    corrupted: Option<&[bool]>,
) -> Result<Vec<PartitionStats>> {
    partition.check_covers(bleu.len())?;
    Ok(partition
        .subsets()
        .iter()
        .enumerate()
        .map(|(k, ids)| {
            let vals: Vec<f64> = ids.iter().map(|&i| bleu[i]).collect();
            PartitionStats {
                subset: k + 1,
                size: ids.len(),
                min_bleu: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max_bleu: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean_bleu: vals.iter().sum::<f64>() / vals.len() as f64,
                corrupted_fraction: corrupted
                    .map(|f| ids.iter().filter(|&&i| f[i]).count() as f64 / ids.len() as f64),
            }
        })
        .collect())
}

pub fn partition_stats_csv(stats: &[PartitionStats]) -> String {
    let mut out = String::from("subset,size,min_bleu,max_bleu,mean_bleu,corrupted_fraction\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{:.2},{:.2},{:.2},{}\n",
            s.subset,
            s.size,
            s.min_bleu,
            s.max_bleu,
            s.mean_bleu,
            s.corrupted_fraction.map_or_else(String::new, |f| format!("{f:.4}"))
        ));
    }
    out
}

/// One line per subset: `D_k  min-max  avg mean`.
pub fn render_partition_stats(stats: &[PartitionStats]) -> String {
    stats
        .iter()
        .map(|s| format!("D_{}\t{:.2}-{:.2}\tavg {:.2}\n", s.subset, s.min_bleu, s.max_bleu, s.mean_bleu))
        .collect()
}

/// Wide CSV: a `step` column followed by one dev-BLEU column per run, empty
/// where a run has no point at that step.
pub fn merge_curves(curves: &[(String, Vec<CurvePoint>)]) -> Result<String> {
    let mut names = BTreeSet::new();
    for (name, _) in curves {
        if name.contains(',') || !names.insert(name.as_str()) {
            return Err(Error::Argument(format!("bad or duplicate curve name '{name}'")));
        }
    }
    let steps: BTreeSet<u64> = curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.step)).collect();
    let mut out = String::from("step");
    for (name, _) in curves {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for step in steps {
        out.push_str(&step.to_string());
        for (_, c) in curves {
            out.push(',');
            // the last point wins if a run logged the same step twice
            if let Some(p) = c.iter().rev().find(|p| p.step == step) {
                out.push_str(&p.dev_bleu.to_string());
            }
        }
        out.push('\n');
    }
    Ok(out)
}
