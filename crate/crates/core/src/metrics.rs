//! Median scaling and the standard depth error/accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CLAMP: (f64, f64) = (0.1, 80.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
    /// Median-scaling factor applied to the prediction (mean over frames
    /// for dataset reports).
    pub scale: f64,
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 7] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "d1", "d2", "d3"];

    pub fn values(&self) -> [f64; 7] {
        [self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3]
    }
}

/// Running sums for pixel-weighted aggregation across frames.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSums {
    abs_rel: f64,
    sq_rel: f64,
    sq: f64,
    sq_log: f64,
    d: [usize; 3],
    n: usize,
    scale_sum: f64,
    frames: usize,
}

impl MetricSums {
    /// Adds already clamped, positive `(pred, gt)` pairs.
    fn push(&mut self, p: f64, g: f64) {
        let diff = p - g;
        self.abs_rel += diff.abs() / g;
        self.sq_rel += diff * diff / g;
        self.sq += diff * diff;
        let l = p.ln() - g.ln();
        self.sq_log += l * l;
        let ratio = (p / g).max(g / p);
        for (k, thr) in [1.25, 1.25f64.powi(2), 1.25f64.powi(3)].into_iter().enumerate() {
            if ratio < thr {
                self.d[k] += 1;
            }
        }
        self.n += 1;
    }

    pub fn merge(&mut self, other: &MetricSums) {
        self.abs_rel += other.abs_rel;
        self.sq_rel += other.sq_rel;
        self.sq += other.sq;
        self.sq_log += other.sq_log;
        for k in 0..3 {
            self.d[k] += other.d[k];
        }
        self.n += other.n;
        self.scale_sum += other.scale_sum;
        self.frames += other.frames;
    }

    pub fn n_pixels(&self) -> usize {
        self.n
    }

    pub fn report(&self) -> Result<MetricsReport> {
        if self.n == 0 {
            return Err(Error::EmptyValidSet);
        }
        let n = self.n as f64;
        Ok(MetricsReport {
            abs_rel: self.abs_rel / n,
            sq_rel: self.sq_rel / n,
            rmse: (self.sq / n).sqrt(),
            rmse_log: (self.sq_log / n).sqrt(),
            delta1: self.d[0] as f64 / n,
            delta2: self.d[1] as f64 / n,
            delta3: self.d[2] as f64 / n,
            n_pixels: self.n,
            scale: if self.frames == 0 { 1.0 } else { self.scale_sum / self.frames as f64 },
        })
    }
}

fn check_lengths(pred: &[f64], gt: &[f64], valid: Option<&[bool]>) -> Result<()> {
    if pred.len() != gt.len() || valid.is_some_and(|v| v.len() != pred.len()) {
        return Err(Error::Shape(format!(
            "metrics: pred {} / gt {} / mask {:?}",
            pred.len(),
            gt.len(),
            valid.map(|v| v.len())
        )));
    }
    Ok(())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scales `pred` by `median(gt / pred)` over the valid set.
pub fn median_scale(pred: &[f64], gt: &[f64], valid: Option<&[bool]>) -> Result<(Vec<f64>, f64)> {
    check_lengths(pred, gt, valid)?;
    let mut ratios = Vec::with_capacity(pred.len());
    for i in 0..pred.len() {
        if valid.map_or(true, |v| v[i]) {
            if !(gt[i] > 0.0) {
                return Err(Error::InvalidDepth(gt[i]));
            }
            if !(pred[i] > 0.0) {
                return Err(Error::InvalidDepth(pred[i]));
            }
            ratios.push(gt[i] / pred[i]);
        }
    }
    if ratios.is_empty() {
        return Err(Error::EmptyValidSet);
    }
    let factor = median(&mut ratios);
    Ok((pred.iter().map(|p| p * factor).collect(), factor))
}

/// Accumulates one frame's metrics after clamping both maps to `clamp`.
pub fn metric_sums(pred: &[f64], gt: &[f64], clamp: (f64, f64), valid: Option<&[bool]>) -> Result<MetricSums> {
    check_lengths(pred, gt, valid)?;
    let mut s = MetricSums::default();
    for i in 0..pred.len() {
        if valid.map_or(true, |v| v[i]) {
            let p = pred[i].clamp(clamp.0, clamp.1);
            let g = gt[i].clamp(clamp.0, clamp.1);
            if !(p > 0.0) || !(g > 0.0) {
                return Err(Error::InvalidDepth(if p > 0.0 { g } else { p }));
            }
            s.push(p, g);
        }
    }
    Ok(s)
}

/// All seven metrics of `pred` against `gt` (no scaling applied).
pub fn compute_metrics(pred: &[f64], gt: &[f64], clamp: (f64, f64), valid: Option<&[bool]>) -> Result<MetricsReport> {
    metric_sums(pred, gt, clamp, valid)?.report()
}

/// Median-scales then accumulates one frame.
pub fn frame_sums(pred: &[f64], gt: &[f64], clamp: (f64, f64), valid: Option<&[bool]>) -> Result<MetricSums> {
    let (scaled, factor) = median_scale(pred, gt, valid)?;
    let mut s = metric_sums(&scaled, gt, clamp, valid)?;
    s.scale_sum = factor;
    s.frames = 1;
    Ok(s)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Every valid pixel in the dataset weighs the same.
    #[default]
    PixelWeighted,
    /// Metrics are computed per frame and then averaged.
    FrameMean,
}

/// Combines per-frame sums into one report.
pub fn aggregate(frames: &[MetricSums], how: Aggregation) -> Result<MetricsReport> {
    match how {
        Aggregation::PixelWeighted => {
            let mut total = MetricSums::default();
            frames.iter().for_each(|f| total.merge(f));
            total.report()
        }
        Aggregation::FrameMean => {
            if frames.is_empty() {
                return Err(Error::EmptyValidSet);
            }
            let reports = frames.iter().map(|f| f.report()).collect::<Result<Vec<_>>>()?;
            let k = reports.len() as f64;
            let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
            Ok(MetricsReport {
                abs_rel: mean(|r| r.abs_rel),
                sq_rel: mean(|r| r.sq_rel),
                rmse: mean(|r| r.rmse),
                rmse_log: mean(|r| r.rmse_log),
                delta1: mean(|r| r.delta1),
                delta2: mean(|r| r.delta2),
                delta3: mean(|r| r.delta3),
                n_pixels: reports.iter().map(|r| r.n_pixels).sum(),
                scale: mean(|r| r.scale),
            })
        }
    }
}

/// Aligned plain-text table, one row per labelled report.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(3);
    let mut out = format!("{:<label_w$}", "run");
    for c in MetricsReport::COLUMNS {
        out.push_str(&format!(" {c:>9}"));
    }
    out.push('\n');
    for (label, r) in rows {
        out.push_str(&format!("{label:<label_w$}"));
        for v in r.values() {
            out.push_str(&format!(" {v:>9.4}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let r = compute_metrics(&[2.0, 8.0], &[4.0, 4.0], DEFAULT_CLAMP, None).unwrap();
        assert_eq!(r.abs_rel, 0.75);
        assert_eq!(r.sq_rel, 2.5);
        assert!((r.rmse - 10f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.delta1, 0.0);
    }

    #[test]
    fn uniform_overshoot() {
        let gt = [1.0, 2.0, 5.0, 7.5];
        let pred: Vec<f64> = gt.iter().map(|g| 1.2 * g).collect();
        let r = compute_metrics(&pred, &gt, DEFAULT_CLAMP, None).unwrap();
        assert!((r.abs_rel - 0.2).abs() < 1e-12);
        assert_eq!(r.delta1, 1.0);
    }

    #[test]
    fn median_scale_examples() {
        let gt = [1.0, 3.0, 4.0];
        let (s, f) = median_scale(&[2.0, 6.0, 8.0], &gt, None).unwrap();
        assert_eq!(f, 0.5);
        assert_eq!(s, gt);
        assert_eq!(median_scale(&gt, &gt, None).unwrap().1, 1.0);
        assert!(matches!(median_scale(&gt, &gt, Some(&[false; 3])), Err(Error::EmptyValidSet)));
    }

    #[test]
    fn table_has_header_and_rows() {
        let r = compute_metrics(&[1.0], &[1.0], DEFAULT_CLAMP, None).unwrap();
        let t = format_table(&[("a".into(), r), ("b".into(), r)]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.starts_with("run"));
    }
}
