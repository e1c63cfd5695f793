//! Pixel-exact threshold-sweep evaluation: precision, recall, F1, ODS, OIS
//! and mIoU, plus aggregation of noise-robustness runs.

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};

/// Threshold used for single-point metrics.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `0.01, 0.02, ..., 0.99`.
pub fn default_thresholds() -> Vec<f64> {
    (1..100).map(|j| j as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// `(1/2) [TP/(TP+FP+FN) + TN/(TN+FN+FP)]`, each 0/0 term taken as 0.
    pub fn miou(&self) -> f64 {
        0.5 * (ratio(self.tp, self.tp + self.fp + self.fn_) + ratio(self.tn, self.tn + self.fn_ + self.fp))
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Counts for prediction `[p >= t]` against a mask (`y >= 0.5` is foreground).
pub fn confusion(p: &[f64], y: &[f64], t: f64) -> Result<ConfusionCounts> {
    if p.len() != y.len() {
        return Err(Error::shape("confusion", format!("{} predictions vs {} labels", p.len(), y.len())));
    }
    let mut c = ConfusionCounts::default();
    for (&pv, &yv) in p.iter().zip(y) {
        match (pv >= t, yv >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Per-image confusion counts at every threshold of an ascending grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSweep {
    pub thresholds: Vec<f64>,
    /// `counts[image][threshold]`.
    pub counts: Vec<Vec<ConfusionCounts>>,
}

impl ThresholdSweep {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() || thresholds.windows(2).any(|w| w[0] >= w[1]) || thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::Config("thresholds must be strictly ascending inside (0, 1)".into()));
        }
        Ok(Self { thresholds, counts: Vec::new() })
    }

    /// Sweep over `images` of `(probabilities, mask)` pairs.
    pub fn build<'a>(thresholds: Vec<f64>, images: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> Result<Self> {
        let mut s = Self::new(thresholds)?;
        for (p, y) in images {
            s.push(p, y)?;
        }
        Ok(s)
    }

    /// Add one image. Sorting the predictions makes every threshold a binary
    /// search instead of a pass over the pixels.
    pub fn push(&mut self, p: &[f64], y: &[f64]) -> Result<()> {
        if p.len() != y.len() {
            return Err(Error::shape("threshold_sweep", format!("{} predictions vs {} labels", p.len(), y.len())));
        }
        if p.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN probability in evaluation".into()));
        }
        let mut pos: Vec<f64> = Vec::new();
        let mut neg: Vec<f64> = Vec::new();
        for (&pv, &yv) in p.iter().zip(y) {
            if yv >= 0.5 {
                pos.push(pv)
            } else {
                neg.push(pv)
            }
        }
        pos.sort_by(f64::total_cmp);
        neg.sort_by(f64::total_cmp);
        let at_least = |v: &[f64], t: f64| (v.len() - v.partition_point(|&x| x < t)) as u64;
        let row = self
            .thresholds
            .iter()
            .map(|&t| {
                let (tp, fp) = (at_least(&pos, t), at_least(&neg, t));
                ConfusionCounts {
                    tp,
                    fp,
                    fn_: pos.len() as u64 - tp,
                    tn: neg.len() as u64 - fp,
                }
            })
            .collect();
        self.counts.push(row);
        Ok(())
    }

    pub fn images(&self) -> usize {
        self.counts.len()
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.counts.is_empty() {
            Err(Error::Data("threshold sweep over zero images".into()))
        } else {
            Ok(())
        }
    }

    /// Counts pooled over images at threshold index `k`.
    pub fn pooled(&self, k: usize) -> ConfusionCounts {
        self.counts.iter().map(|row| row[k]).sum()
    }

    /// Dataset-level optimum: best F1 of pooled counts over thresholds.
    /// Returns `(f1, threshold)`; ties keep the lowest threshold.
    pub fn ods(&self) -> Result<(f64, f64)> {
        self.ensure_nonempty()?;
        let mut best = (f64::NEG_INFINITY, self.thresholds[0]);
        for (k, &t) in self.thresholds.iter().enumerate() {
            let f = self.pooled(k).f1();
            if f > best.0 {
                best = (f, t);
            }
        }
        Ok(best)
    }

    /// Image-level optimum: mean over images of each image's best F1.
    pub fn ois(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        let sum: f64 = self
            .counts
            .iter()
            .map(|row| row.iter().map(ConfusionCounts::f1).fold(f64::NEG_INFINITY, f64::max))
            .sum();
        Ok(sum / self.counts.len() as f64)
    }
}

/// Free-function form of [`ThresholdSweep::ods`], value only.
pub fn ods(sweep: &ThresholdSweep) -> Result<f64> {
    Ok(sweep.ods()?.0)
}

pub fn ois(sweep: &ThresholdSweep) -> Result<f64> {
    sweep.ois()
}

/// mIoU of one prediction map at threshold `t`.
pub fn miou(p: &[f64], y: &[f64], t: f64) -> Result<f64> {
    Ok(confusion(p, y, t)?.miou())
}

/// Summary of one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub images: usize,
    /// Pooled counts at [`DEFAULT_THRESHOLD`].
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ods: f64,
    pub ods_threshold: f64,
    pub ois: f64,
    pub miou: f64,
}

/// Metric names in CSV order.
pub const REPORT_METRICS: [&str; 6] = ["precision", "recall", "f1", "ods", "ois", "miou"];

impl EvalReport {
    /// Evaluate probability maps against masks with the default grid.
    pub fn compute<'a>(images: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> Result<Self> {
        let pairs: Vec<_> = images.into_iter().collect();
        let sweep = ThresholdSweep::build(default_thresholds(), pairs.iter().copied())?;
        let counts = pairs
            .iter()
            .map(|(p, y)| confusion(p, y, DEFAULT_THRESHOLD))
            .sum::<Result<ConfusionCounts>>()?;
        Self::from_parts(&sweep, counts)
    }

    pub fn from_parts(sweep: &ThresholdSweep, counts: ConfusionCounts) -> Result<Self> {
        let (ods, ods_threshold) = sweep.ods()?;
        Ok(Self {
            images: sweep.images(),
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            ods,
            ods_threshold,
            ois: sweep.ois()?,
            miou: counts.miou(),
        })
    }

    /// `(metric, threshold, value)` in [`REPORT_METRICS`] order. OIS has no
    /// single threshold and reports an empty field.
    pub fn rows(&self) -> Vec<(&'static str, Option<f64>, f64)> {
        let t = Some(DEFAULT_THRESHOLD);
        vec![
            ("precision", t, self.precision),
            ("recall", t, self.recall),
            ("f1", t, self.f1),
            ("ods", Some(self.ods_threshold), self.ods),
            ("ois", None, self.ois),
            ("miou", t, self.miou),
        ]
    }

    /// CSV with header `metric,threshold,value,sigma`.
    pub fn to_csv(&self, sigma: f64) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        push_rows(&mut s, self, sigma);
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "images     {}", self.images)?;
        writeln!(f, "precision  {:.6}  (t=0.50)", self.precision)?;
        writeln!(f, "recall     {:.6}  (t=0.50)", self.recall)?;
        writeln!(f, "f1         {:.6}  (t=0.50)", self.f1)?;
        writeln!(f, "ods        {:.6}  (t={:.2})", self.ods, self.ods_threshold)?;
        writeln!(f, "ois        {:.6}", self.ois)?;
        write!(f, "miou       {:.6}  (t=0.50)", self.miou)
    }
}

pub const CSV_HEADER: &str = "metric,threshold,value,sigma";

fn push_rows(s: &mut String, r: &EvalReport, sigma: f64) {
    for (name, t, v) in r.rows() {
        let t = t.map(|t| format!("{t:.2}")).unwrap_or_default();
        let _ = writeln!(s, "{name},{t},{v:.9},{sigma}");
    }
}

/// Reports at several noise levels with relative mIoU decline.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub levels: Vec<(f64, EvalReport)>,
}

impl RobustnessReport {
    /// `(mIoU(0) - mIoU(sigma)) / mIoU(0)` against the first level, which
    /// should be the clean run. Zero when the clean mIoU is zero.
    pub fn drop_rates(&self) -> Vec<f64> {
        let Some((_, base)) = self.levels.first() else { return Vec::new() };
        self.levels
            .iter()
            .map(|(_, r)| if base.miou == 0.0 { 0.0 } else { (base.miou - r.miou) / base.miou })
            .collect()
    }

    /// Every report row per sigma, plus a `drop_rate` row per sigma.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for ((sigma, r), d) in self.levels.iter().zip(self.drop_rates()) {
            push_rows(&mut s, r, *sigma);
            let _ = writeln!(s, "drop_rate,{DEFAULT_THRESHOLD:.2},{d:.9},{sigma}");
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = String::from("sigma    f1@0.5     ods        ois        miou       drop_rate\n");
        for ((sigma, r), d) in self.levels.iter().zip(self.drop_rates()) {
            let _ = writeln!(s, "{sigma:<8.3} {:<10.6} {:<10.6} {:<10.6} {:<10.6} {d:.6}", r.f1, r.ods, r.ois, r.miou);
        }
        s
    }
}

/// Evaluate at each sigma through `eval`. The first sigma must be 0 so drop
/// rates are relative to the clean run.
pub fn robustness_sweep(sigmas: &[f64], mut eval: impl FnMut(f64) -> Result<EvalReport>) -> Result<RobustnessReport> {
    if sigmas.is_empty() {
        return Err(Error::Config("noise sweep needs at least one sigma".into()));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(Error::Config(format!("noise sigma must be finite and >= 0, got {s}")));
    }
    if sigmas[0] != 0.0 {
        return Err(Error::Config("the first noise level must be 0 (the clean reference)".into()));
    }
    let levels = sigmas.iter().map(|&s| Ok((s, eval(s)?))).collect::<Result<_>>()?;
    Ok(RobustnessReport { levels })
}
