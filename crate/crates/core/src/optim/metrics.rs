use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::ci95;

/// Count regression quality on a held-out set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub n: usize,
    pub mse: f64,
    pub r2: f64,
    pub l1_mean: f64,
    pub l1_max: f64,
    /// Fraction of truths inside the predicted 95% interval.
    pub ci_coverage: f64,
}

/// `r2 = 1 - SSE / SST`. When the truths have zero spread, `r2` is 1 for a perfect
/// fit and 0 otherwise.
pub fn metrics(preds: &[f64], logvars: &[f64], truths: &[f64]) -> Result<Metrics> {
    let n = truths.len();
    if preds.len() != n || logvars.len() != n {
        return Err(Error::invalid(format!(
            "metrics: {} predictions, {} log-variances, {} truths",
            preds.len(),
            logvars.len(),
            n
        )));
    }
    if n < 2 {
        return Err(Error::invalid("metrics: need at least two samples"));
    }
    let mean_t = truths.iter().sum::<f64>() / n as f64;
    let sse: f64 = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    let sst: f64 = truths.iter().map(|t| (t - mean_t) * (t - mean_t)).sum();
    let r2 = if sst > 0.0 {
        1.0 - sse / sst
    } else if sse == 0.0 {
        1.0
    } else {
        0.0
    };
    let l1: Vec<f64> = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t).abs())
        .collect();
    let covered = preds
        .iter()
        .zip(logvars)
        .zip(truths)
        .filter(|((&p, &s), &t)| ci95(p, s).contains(t))
        .count();
    Ok(Metrics {
        n,
        mse: sse / n as f64,
        r2,
        l1_mean: l1.iter().sum::<f64>() / n as f64,
        l1_max: l1.iter().copied().fold(0.0, f64::max),
        ci_coverage: covered as f64 / n as f64,
    })
}

impl Metrics {
    pub fn to_csv(&self) -> String {
        format!(
            "n,mse,r2,l1_mean,l1_max,ci_coverage\n{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            self.n, self.mse, self.r2, self.l1_mean, self.l1_max, self.ci_coverage
        )
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(self.to_csv().as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    /// `key=value` result line for stdout.
    pub fn kv_line(&self) -> String {
        format!(
            "n={} mse={:.4} r2={:.4} l1_mean={:.4} l1_max={:.4} ci_coverage={:.4}",
            self.n, self.mse, self.r2, self.l1_mean, self.l1_max, self.ci_coverage
        )
    }
}
