//! Cross-entropy, temperature-scaled KL self-distillation terms and their
//! weighted sum, with gradients with respect to the logits.
//!
//! KL terms use the final-block distribution as the first argument,
//! `KL(p(l_n) || p(other))`, with no `T^2` rescaling. Batch reduction is the
//! mean over rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities inside logarithms.
pub const LOG_EPS: f64 = 1e-12;

/// Row-major `(rows, classes)` matrix of class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    rows: usize,
    classes: usize,
    data: Vec<f64>,
}

impl Logits {
    pub fn from_vec(rows: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * classes {
            return Err(Error::Dimension(format!(
                "{} values cannot form a {rows}x{classes} logit matrix",
                data.len()
            )));
        }
        Ok(Logits { rows, classes, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Dimension("ragged logit rows".into()));
        }
        Self::from_vec(rows.len(), classes, rows.concat())
    }

    pub fn zeros(rows: usize, classes: usize) -> Self {
        Logits {
            rows,
            classes,
            data: vec![0.0; rows * classes],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.classes..(r + 1) * self.classes]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.classes..(r + 1) * self.classes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.classes.max(1))
    }

    pub fn argmax(&self, r: usize) -> usize {
        argmax(self.row(r))
    }

    /// Takes the values out of the autodiff graph: the result is a constant for
    /// every subsequent loss.
    pub fn detach(&self) -> Detached {
        Detached(self.clone())
    }

    fn same_shape(&self, other: &Logits) -> Result<()> {
        if self.rows != other.rows || self.classes != other.classes {
            return Err(Error::Dimension(format!(
                "logit shapes differ: {}x{} vs {}x{}",
                self.rows, self.classes, other.rows, other.classes
            )));
        }
        Ok(())
    }
}

/// Logits carrying no gradient path back to model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Detached(Logits);

impl Detached {
    pub fn logits(&self) -> &Logits {
        &self.0
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Temperature for the intermediate-block term.
    pub t1: f64,
    /// Temperature for the augmentation term.
    pub t2: f64,
    /// Weight on the intermediate-block term.
    pub lambda: f64,
    /// Weight on the augmentation term.
    pub gamma: f64,
    /// Treat the final-block distribution as a constant teacher in the
    /// intermediate-block term. Off by default: gradients reach both sides.
    #[serde(default)]
    pub detach_ibsd_teacher: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            t1: 5.0,
            t2: 1.0,
            lambda: 0.2,
            gamma: 1.0,
            detach_ibsd_teacher: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.t1)?;
        check_temperature(self.t2)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0 (lambda {}, gamma {})",
                self.lambda, self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ibsd: f64,
    pub agsd: f64,
    pub total: f64,
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("temperature must be a positive finite number, got {t}")));
    }
    Ok(())
}

/// `softmax(logits / t)`, computed with max subtraction.
pub fn softmax_temp(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    check_temperature(t)?;
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Value(format!("non-finite logit {bad}")));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| ((v - max) / t).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

/// `sum_j p_j ln(p_j / max(q_j, eps))`, skipping `p_j = 0`.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "distributions have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    let kl = p
        .iter()
        .zip(q)
        .filter(|(&pj, _)| pj > 0.0)
        .map(|(&pj, &qj)| pj * (pj.ln() - qj.max(LOG_EPS).ln()))
        .sum::<f64>();
    // Rounding can leave tiny negatives when p == q.
    Ok(kl.max(0.0))
}

fn batch_kl(teacher: &Logits, student: &Logits, t: f64) -> Result<f64> {
    teacher.same_shape(student)?;
    if teacher.rows == 0 {
        return Err(Error::Dimension("empty logit batch".into()));
    }
    let mut sum = 0.0;
    for r in 0..teacher.rows {
        let p = softmax_temp(teacher.row(r), t)?;
        let q = softmax_temp(student.row(r), t)?;
        sum += kl_div(&p, &q)?;
    }
    Ok(sum / teacher.rows as f64)
}

/// Intermediate-block distillation: mean over rows of
/// `KL(softmax(l_n / t1) || softmax(l_i / t1))`.
pub fn ibsd_loss(final_logits: &Logits, tapped: &Logits, t1: f64) -> Result<f64> {
    batch_kl(final_logits, tapped, t1)
}

/// Augmentation-guided distillation: mean over rows of
/// `KL(softmax(l_n / t2) || softmax(l_an / t2))`, where the augmented logits
/// are constants.
pub fn agsd_loss(final_logits: &Logits, augmented: &Detached, t2: f64) -> Result<f64> {
    batch_kl(final_logits, &augmented.0, t2)
}

/// Mean over rows of `-ln(max(y_hat[true], eps))`.
pub fn cross_entropy(one_hot: &[f64], probs: &[f64], classes: usize) -> Result<f64> {
    if classes == 0 || one_hot.len() != probs.len() || one_hot.len() % classes != 0 || one_hot.is_empty() {
        return Err(Error::Dimension(format!(
            "one-hot ({}) and probability ({}) buffers do not form equal batches of width {classes}",
            one_hot.len(),
            probs.len()
        )));
    }
    let rows = one_hot.len() / classes;
    let mut sum = 0.0;
    for (r, (y, p)) in one_hot.chunks(classes).zip(probs.chunks(classes)).enumerate() {
        let idx = one_hot_index(y).ok_or_else(|| Error::Value(format!("row {r} of labels is not one-hot")))?;
        sum -= p[idx].max(LOG_EPS).ln();
    }
    Ok(sum / rows as f64)
}

pub fn one_hot_index(y: &[f64]) -> Option<usize> {
    let mut idx = None;
    for (j, &v) in y.iter().enumerate() {
        if v == 1.0 {
            if idx.is_some() {
                return None;
            }
            idx = Some(j);
        } else if v != 0.0 {
            return None;
        }
    }
    idx
}

pub fn one_hot(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        out[r * classes + l] = 1.0;
    }
    out
}

/// Softmax at temperature 1 applied row-wise.
pub fn softmax_rows(logits: &Logits) -> Result<Logits> {
    let mut data = Vec::with_capacity(logits.data.len());
    for row in logits.iter_rows() {
        data.extend(softmax_temp(row, 1.0)?);
    }
    Logits::from_vec(logits.rows, logits.classes, data)
}

/// `ce + lambda * ibsd + gamma * agsd`.
pub fn total_loss(ce: f64, ibsd: f64, agsd: f64, config: &LossConfig) -> Result<LossBreakdown> {
    for (name, v) in [("ce", ce), ("ibsd", ibsd), ("agsd", agsd)] {
        if !v.is_finite() {
            return Err(Error::Value(format!("loss component {name} is {v}")));
        }
    }
    Ok(LossBreakdown {
        ce,
        ibsd,
        agsd,
        total: ce + config.lambda * ibsd + config.gamma * agsd,
    })
}

/// Gradients of the batch-mean KL term with respect to both logit sets.
///
/// For `p = softmax(a/t)`, `q = softmax(b/t)`:
/// `dKL/db = (q - p) / t` and `dKL/da = p * (ln p - ln q - KL) / t`.
/// Derivatives are those of the unclamped expression.
pub fn kl_grads(teacher: &Logits, student: &Logits, t: f64) -> Result<(Logits, Logits)> {
    teacher.same_shape(student)?;
    let n = teacher.rows as f64;
    let mut da = Logits::zeros(teacher.rows, teacher.classes);
    let mut db = Logits::zeros(teacher.rows, teacher.classes);
    for r in 0..teacher.rows {
        let p = softmax_temp(teacher.row(r), t)?;
        let q = softmax_temp(student.row(r), t)?;
        let logs: Vec<f64> = p
            .iter()
            .zip(&q)
            .map(|(&pj, &qj)| if pj > 0.0 { pj.ln() - qj.ln() } else { 0.0 })
            .collect();
        let kl: f64 = p.iter().zip(&logs).map(|(pj, l)| pj * l).sum();
        for j in 0..teacher.classes {
            da.row_mut(r)[j] = p[j] * (logs[j] - kl) / (t * n);
            db.row_mut(r)[j] = (q[j] - p[j]) / (t * n);
        }
    }
    Ok((da, db))
}

/// Gradient of the batch-mean cross-entropy of `softmax(logits)` with respect
/// to the logits: `(softmax(l) - y) / batch`.
pub fn cross_entropy_grad(logits: &Logits, one_hot: &[f64]) -> Result<Logits> {
    if one_hot.len() != logits.data.len() {
        return Err(Error::Dimension("label and logit batches differ".into()));
    }
    let probs = softmax_rows(logits)?;
    let n = logits.rows as f64;
    let data = probs
        .data
        .iter()
        .zip(one_hot)
        .map(|(p, y)| (p - y) / n)
        .collect();
    Logits::from_vec(logits.rows, logits.classes, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    const E: f64 = std::f64::consts::E;

    fn l(rows: &[&[f64]]) -> Logits {
        Logits::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn softmax_hand_values() {
        for t in [0.1, 1.0, 7.0] {
            let s = softmax_temp(&[0.0, 0.0, 0.0], t).unwrap();
            assert!(s.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
        let s = softmax_temp(&[1.0, 0.0], 1.0).unwrap();
        assert!((s[0] - E / (1.0 + E)).abs() < 1e-15);
        assert!((s[0] - 0.7311).abs() < 1e-4 && (s[1] - 0.2689).abs() < 1e-4);
        let s = softmax_temp(&[1.0, 0.0], 5.0).unwrap();
        assert!((s[0] - 0.5498).abs() < 1e-4 && (s[1] - 0.4502).abs() < 1e-4);
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax_temp(&[1.0], 0.0), Err(Error::Domain(_))));
        assert!(matches!(softmax_temp(&[1.0], -2.0), Err(Error::Domain(_))));
        assert!(matches!(softmax_temp(&[f64::NAN, 1.0], 1.0), Err(Error::Value(_))));
        assert!(matches!(softmax_temp(&[f64::INFINITY], 1.0), Err(Error::Value(_))));
    }

    #[test]
    fn kl_hand_value_and_errors() {
        let p = softmax_temp(&[1.0, 0.0], 1.0).unwrap();
        let q = softmax_temp(&[0.0, 1.0], 1.0).unwrap();
        let kl = kl_div(&p, &q).unwrap();
        assert!((kl - (E - 1.0) / (E + 1.0)).abs() < 1e-12);
        assert!((kl - 0.4621).abs() < 1e-4);
        assert!(matches!(kl_div(&[1.0], &[0.5, 0.5]), Err(Error::Dimension(_))));
        // p_j = 0 terms vanish; q below eps is clamped
        assert_eq!(kl_div(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), -(LOG_EPS.ln()));
        assert_eq!(kl_div(&[0.25, 0.75], &[0.25, 0.75]).unwrap(), 0.0);
    }

    #[test]
    fn batch_terms() {
        let a = l(&[&[1.0, 0.0]]);
        let b = l(&[&[0.0, 1.0]]);
        assert!((ibsd_loss(&a, &b, 1.0).unwrap() - 0.4621).abs() < 1e-4);
        let t5 = ibsd_loss(&a, &b, 5.0).unwrap();
        assert!((t5 - 0.01993).abs() < 1e-4, "{t5}");
        assert!((agsd_loss(&a, &b.detach(), 1.0).unwrap() - 0.4621).abs() < 1e-4);
        assert_eq!(ibsd_loss(&a, &a, 5.0).unwrap(), 0.0);
        assert_eq!(agsd_loss(&a, &a.detach(), 1.0).unwrap(), 0.0);
        let c = l(&[&[0.0, 1.0, 2.0]]);
        assert!(matches!(ibsd_loss(&a, &c, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        let ce = cross_entropy(&[0.0, 1.0, 0.0], &[0.25, 0.5, 0.25], 3).unwrap();
        assert!((ce - 0.5f64.ln().abs()).abs() < 1e-15);
        assert_eq!(cross_entropy(&[0.0, 1.0], &[0.0, 1.0], 2).unwrap(), 0.0);
        let c = 7;
        let uniform = vec![1.0 / c as f64; c];
        let ce = cross_entropy(&one_hot(&[3], c), &uniform, c).unwrap();
        assert!((ce - (c as f64).ln()).abs() < 1e-12);
        assert!(matches!(cross_entropy(&[0.5, 0.5], &[0.5, 0.5], 2), Err(Error::Value(_))));
        assert!(matches!(cross_entropy(&[1.0, 1.0], &[0.5, 0.5], 2), Err(Error::Value(_))));
    }

    #[test]
    fn total_arithmetic() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(1.0, 0.5, 0.25, &cfg).unwrap().total, 1.35);
        let erm = LossConfig {
            lambda: 0.0,
            gamma: 0.0,
            ..cfg.clone()
        };
        assert_eq!(total_loss(0.7, 3.0, 9.0, &erm).unwrap().total, 0.7);
        let err = total_loss(1.0, f64::NAN, 0.0, &cfg).unwrap_err().to_string();
        assert!(err.contains("ibsd"));
    }

    #[test]
    fn defaults_match_fixed_hyperparameters() {
        let cfg = LossConfig::default();
        assert_eq!((cfg.lambda, cfg.t1, cfg.gamma, cfg.t2), (0.2, 5.0, 1.0, 1.0));
        assert!(!cfg.detach_ibsd_teacher);
        assert!(LossConfig { t1: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(LossConfig { gamma: -1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn kl_grads_match_differences() {
        let a = l(&[&[0.3, -1.2, 2.0], &[1.0, 0.5, -0.5]]);
        let b = l(&[&[-0.4, 0.9, 0.1], &[0.0, 2.0, 1.0]]);
        for t in [1.0, 5.0] {
            let (da, db) = kl_grads(&a, &b, t).unwrap();
            let h = 1e-6;
            for r in 0..2 {
                for j in 0..3 {
                    let bump = |m: &Logits, s: f64| {
                        let mut m = m.clone();
                        m.row_mut(r)[j] += s;
                        m
                    };
                    let fa = (ibsd_loss(&bump(&a, h), &b, t).unwrap() - ibsd_loss(&bump(&a, -h), &b, t).unwrap()) / (2.0 * h);
                    let fb = (ibsd_loss(&a, &bump(&b, h), t).unwrap() - ibsd_loss(&a, &bump(&b, -h), t).unwrap()) / (2.0 * h);
                    assert!((fa - da.row(r)[j]).abs() < 1e-8);
                    assert!((fb - db.row(r)[j]).abs() < 1e-8);
                }
            }
        }
    }
}
