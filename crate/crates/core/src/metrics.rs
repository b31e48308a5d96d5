//! Task metrics and stability statistics.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Binary confusion counts with class 1 as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn from_predictions(predictions: &[usize], labels: &[usize]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(LabError::invalid(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut c = Self::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            if p > 1 || l > 1 {
                return Err(LabError::invalid("confusion counts need binary labels"));
            }
            match (p == 1, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(LabError::invalid("metric on all-zero confusion counts"));
        }
        Ok(())
    }

    pub fn accuracy(&self) -> Result<f64> {
        self.nonempty()?;
        Ok((self.tp + self.tn) as f64 / self.total() as f64)
    }

    /// F1 of the positive class; 0 when there are no positives at all.
    pub fn f1(&self) -> Result<f64> {
        self.nonempty()?;
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return Ok(0.0);
        }
        Ok(2.0 * self.tp as f64 / denom as f64)
    }

    /// Matthews correlation; 0 when any marginal is empty.
    pub fn mcc(&self) -> Result<f64> {
        self.nonempty()?;
        let (tp, fp, tn, fn_) = (self.tp as f64, self.fp as f64, self.tn as f64, self.fn_ as f64);
        let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if denom == 0.0 {
            return Ok(0.0);
        }
        Ok((tp * tn - fp * fn_) / denom.sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    #[default]
    Accuracy,
    F1,
    Mcc,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Accuracy => "accuracy",
            Self::F1 => "f1",
            Self::Mcc => "mcc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Self::Accuracy),
            "f1" => Ok(Self::F1),
            "mcc" => Ok(Self::Mcc),
            other => Err(LabError::invalid(format!("unknown metric {other:?}"))),
        }
    }

    /// Scores predictions against labels. F1 and MCC are binary metrics.
    pub fn evaluate(self, predictions: &[usize], labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(LabError::invalid("metric on empty label set"));
        }
        match self {
            Self::Accuracy => {
                if predictions.len() != labels.len() {
                    return Err(LabError::invalid("prediction/label length mismatch"));
                }
                let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
                Ok(hits as f64 / labels.len() as f64)
            }
            Self::F1 => ConfusionCounts::from_predictions(predictions, labels)?.f1(),
            Self::Mcc => ConfusionCounts::from_predictions(predictions, labels)?.mcc(),
        }
    }
}

pub fn perplexity(mean_cross_entropy: f64) -> f64 {
    mean_cross_entropy.exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    /// Sample standard deviation (n - 1 divisor).
    pub std: f64,
    pub mean: f64,
    pub max: f64,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn sample_variance(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(LabError::invalid(format!(
            "sample variance needs >= 2 values, got {}",
            values.len()
        )));
    }
    let m = mean(values);
    Ok(values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64)
}

pub fn summary_stats(values: &[f64]) -> Result<Summary> {
    let std = sample_variance(values)?.sqrt();
    Ok(Summary {
        std,
        mean: mean(values),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Variance of the per-run metric across runs.
pub fn performance_variance_stability(run_metrics: &[f64]) -> Result<f64> {
    sample_variance(run_metrics)
}

/// Mean over points of `p (1 - p)`, where `p` is the fraction of runs that
/// classify the point correctly. `correct[run][point]`.
pub fn per_point_stability(correct: &[Vec<bool>]) -> Result<f64> {
    let points = correct.first().map_or(0, Vec::len);
    if points == 0 {
        return Err(LabError::invalid("per-point stability on an empty matrix"));
    }
    if correct.len() < 2 {
        return Err(LabError::invalid("per-point stability needs >= 2 runs"));
    }
    if correct.iter().any(|r| r.len() != points) {
        return Err(LabError::invalid("ragged correctness matrix"));
    }
    let runs = correct.len() as f64;
    let total: f64 = (0..points)
        .map(|j| {
            let p = correct.iter().filter(|r| r[j]).count() as f64 / runs;
            p * (1.0 - p)
        })
        .sum();
    Ok(total / points as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeveneResult {
    pub w: f64,
    pub p: f64,
}

/// Levene's test for equal variances, centred on group means.
pub fn levene_test(groups: &[Vec<f64>]) -> Result<LeveneResult> {
    let k = groups.len();
    if k < 2 {
        return Err(LabError::invalid("levene test needs >= 2 groups"));
    }
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(LabError::invalid(format!(
            "levene test needs >= 2 values per group, got {}",
            g.len()
        )));
    }
    if groups.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite { op: "levene_test" });
    }
    let z: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let m = mean(g);
            g.iter().map(|x| (x - m).abs()).collect()
        })
        .collect();
    let n_total: usize = groups.iter().map(Vec::len).sum();
    let zbar_i: Vec<f64> = z.iter().map(|zi| mean(zi)).collect();
    let zbar = z.iter().flatten().sum::<f64>() / n_total as f64;

    let between: f64 = z
        .iter()
        .zip(&zbar_i)
        .map(|(zi, m)| zi.len() as f64 * (m - zbar) * (m - zbar))
        .sum();
    let within: f64 = z
        .iter()
        .zip(&zbar_i)
        .map(|(zi, m)| zi.iter().map(|v| (v - m) * (v - m)).sum::<f64>())
        .sum();

    let d1 = (k - 1) as f64;
    let d2 = (n_total - k) as f64;
    if within == 0.0 {
        return Ok(if between == 0.0 {
            LeveneResult { w: 0.0, p: 1.0 }
        } else {
            LeveneResult { w: f64::INFINITY, p: 0.0 }
        });
    }
    let w = (d2 / d1) * between / within;
    Ok(LeveneResult { w, p: f_upper_tail(w, d1, d2)? })
}

/// `P(F > x)` for an F(d1, d2) variable.
pub fn f_upper_tail(x: f64, d1: f64, d2: f64) -> Result<f64> {
    if !(d1 > 0.0 && d2 > 0.0) {
        return Err(LabError::invalid("F degrees of freedom must be positive"));
    }
    if x.is_nan() {
        return Err(LabError::NonFinite { op: "f_upper_tail" });
    }
    if x <= 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    regularized_beta(d2 / (d2 + d1 * x), d2 / 2.0, d1 / 2.0)
}

/// Regularized incomplete beta `I_x(a, b)` via the Lentz continued fraction.
pub fn regularized_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) || !(a > 0.0 && b > 0.0) {
        return Err(LabError::invalid(format!("incomplete beta out of domain: x={x} a={a} b={b}")));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b)
        + a * x.ln()
        + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The fraction converges fast only below the mean; use symmetry above it.
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_fraction(x, a, b)? / a)
    } else {
        Ok(1.0 - front * beta_fraction(1.0 - x, b, a)? / b)
    }
}

fn beta_fraction(x: f64, a: f64, b: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        for num in [
            m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m)),
            -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0)),
        ] {
            d = 1.0 + num * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + num / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < EPS {
            return Ok(h);
        }
    }
    Err(LabError::invalid("incomplete beta continued fraction did not converge"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityComparison {
    pub levene: LeveneResult,
    pub significant: bool,
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.001;

/// Levene's test on two cells, flagged significant when `p < 0.001`.
pub fn compare_stability(a: &[f64], b: &[f64]) -> Result<StabilityComparison> {
    let levene = levene_test(&[a.to_vec(), b.to_vec()])?;
    Ok(StabilityComparison {
        levene,
        significant: levene.p < SIGNIFICANCE_LEVEL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn confusion_fixture() {
        let c = ConfusionCounts::new(3, 1, 4, 2);
        assert_abs_diff_eq!(c.mcc().unwrap(), 10.0 / 600f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(c.f1().unwrap(), 6.0 / 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.accuracy().unwrap(), 0.7, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_conventions() {
        let perfect = ConfusionCounts::new(50, 0, 50, 0);
        assert_eq!(perfect.mcc().unwrap(), 1.0);
        assert_eq!(perfect.f1().unwrap(), 1.0);
        assert_eq!(ConfusionCounts::new(50, 50, 0, 0).mcc().unwrap(), 0.0);
        assert_eq!(ConfusionCounts::new(0, 0, 10, 0).f1().unwrap(), 0.0);
        assert!(ConfusionCounts::default().accuracy().is_err());
    }

    #[test]
    fn summary_and_variance() {
        let s = summary_stats(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.std, s.mean, s.max), (1.0, 2.0, 3.0));
        assert_eq!(summary_stats(&[4.0, 4.0]).unwrap().std, 0.0);
        assert!(summary_stats(&[1.0]).is_err());
        assert_abs_diff_eq!(performance_variance_stability(&[0.5, 0.7]).unwrap(), 0.02, epsilon = 1e-15);
    }

    #[test]
    fn per_point() {
        let agree = vec![vec![true, false], vec![true, false]];
        assert_eq!(per_point_stability(&agree).unwrap(), 0.0);
        let half = vec![vec![true, false], vec![false, true]];
        assert_eq!(per_point_stability(&half).unwrap(), 0.25);
        assert!(per_point_stability(&[]).is_err());
    }

    #[test]
    fn levene_edge_cases() {
        let r = levene_test(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!((r.w, r.p), (0.0, 1.0));
        let r = levene_test(&[vec![2.0; 3], vec![2.0; 4], vec![2.0; 2]]).unwrap();
        assert_eq!((r.w, r.p), (0.0, 1.0));
        let r = levene_test(&[vec![0.0, 0.0, 4.0, 4.0], vec![1.0, 1.0, 3.0, 3.0]]).unwrap();
        assert_eq!((r.w, r.p), (f64::INFINITY, 0.0));
        assert!(levene_test(&[vec![1.0, 2.0]]).is_err());
        assert!(levene_test(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn incomplete_beta_closed_forms() {
        // I_x(1, 1) = x and I_x(a, 1) = x^a.
        assert_abs_diff_eq!(regularized_beta(0.3, 1.0, 1.0).unwrap(), 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(regularized_beta(0.6, 2.5, 1.0).unwrap(), 0.6f64.powf(2.5), epsilon = 1e-14);
        // F(2, 2) tail has the closed form 1 / (1 + x).
        assert_abs_diff_eq!(f_upper_tail(3.0, 2.0, 2.0).unwrap(), 0.25, epsilon = 1e-14);
    }

    #[test]
    fn significance_boundary() {
        let same = compare_stability(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(!same.significant);
        assert_eq!(same.levene.p, 1.0);
    }
}
