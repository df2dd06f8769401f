//! The five-term training objective and its two reduced variants.
//!
//! With `σ` the softmax, `σ̃τ` the softmax at temperature `τ`, `y` the one-hot
//! label and `e` the embedding row of the true label, the terms are
//!
//! | term            | value                      | trains                 |
//! |-----------------|----------------------------|------------------------|
//! | `pred_ce`       | `H(y, σ z1)`               | body, prediction head  |
//! | `emb_target_ce` | `H(σ e, σ z1)`             | body, prediction head  |
//! | `teacher_ce`    | `H(y, σ z2)`               | teacher head           |
//! | `hinge`         | `max(0, (σ z2)_y − α)^p`   | teacher head           |
//! | `emb_learn_ce`  | `H(σ̃τ z2, σ e)`            | embedding              |
//!
//! The first argument of every cross entropy is a constant target. Each term
//! is averaged over the batch; `emb_learn_ce` is averaged over the examples
//! the prediction head gets right when masking is on.

use std::ops::{Add, Div};

use crate::embedding::BoundEmbedding;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{argmax, Tensor};

/// Multipliers applied to each term before summation. All ones by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub pred_ce: f64,
    pub emb_target_ce: f64,
    pub teacher_ce: f64,
    pub hinge: f64,
    pub emb_learn_ce: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        TermWeights { pred_ce: 1.0, emb_target_ce: 1.0, teacher_ce: 1.0, hinge: 1.0, emb_learn_ce: 1.0 }
    }
}

impl TermWeights {
    /// Only the one-hot prediction loss.
    pub fn prediction_only() -> Self {
        TermWeights { pred_ce: 1.0, emb_target_ce: 0.0, teacher_ce: 0.0, hinge: 0.0, emb_learn_ce: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    /// Temperature of the embedding-learning target.
    pub tau: f64,
    /// Hinge threshold on the teacher's true-class probability.
    pub alpha: f64,
    /// Hinge norm order, 1 or 2.
    pub p: u8,
    /// Drop `emb_learn_ce` for examples the prediction head gets wrong.
    pub mask_wrong: bool,
    pub weights: TermWeights,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { tau: 2.0, alpha: 0.9, p: 1, mask_wrong: true, weights: TermWeights::default() }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Parameter(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Parameter(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.p != 1 && self.p != 2 {
            return Err(Error::Parameter(format!("p must be 1 or 2, got {}", self.p)));
        }
        Ok(())
    }
}

/// Per-term loss values. `total` is the sum of the five components; each
/// component already includes its weight.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub pred_ce: f64,
    pub emb_target_ce: f64,
    pub teacher_ce: f64,
    pub hinge: f64,
    pub emb_learn_ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; 5] {
        [self.pred_ce, self.emb_target_ce, self.teacher_ce, self.hinge, self.emb_learn_ce]
    }

    fn from_components(c: [f64; 5]) -> Self {
        LossBreakdown {
            pred_ce: c[0],
            emb_target_ce: c[1],
            teacher_ce: c[2],
            hinge: c[3],
            emb_learn_ce: c[4],
            total: c[0] + c[1] + c[2] + c[3] + c[4],
        }
    }
}

impl Add for LossBreakdown {
    type Output = LossBreakdown;

    fn add(self, o: LossBreakdown) -> LossBreakdown {
        LossBreakdown {
            pred_ce: self.pred_ce + o.pred_ce,
            emb_target_ce: self.emb_target_ce + o.emb_target_ce,
            teacher_ce: self.teacher_ce + o.teacher_ce,
            hinge: self.hinge + o.hinge,
            emb_learn_ce: self.emb_learn_ce + o.emb_learn_ce,
            total: self.total + o.total,
        }
    }
}

impl Div<f64> for LossBreakdown {
    type Output = LossBreakdown;

    fn div(self, d: f64) -> LossBreakdown {
        LossBreakdown {
            pred_ce: self.pred_ce / d,
            emb_target_ce: self.emb_target_ce / d,
            teacher_ce: self.teacher_ce / d,
            hinge: self.hinge / d,
            emb_learn_ce: self.emb_learn_ce / d,
            total: self.total / d,
        }
    }
}

/// Tape handles for an assembled objective. Terms a variant does not use
/// are `None`.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub pred_ce: Var,
    pub emb_target_ce: Option<Var>,
    pub teacher_ce: Option<Var>,
    pub hinge: Option<Var>,
    pub emb_learn_ce: Option<Var>,
    pub breakdown: LossBreakdown,
}

impl Objective {
    /// Handles of the terms that are present, in table order.
    pub fn terms(&self) -> Vec<Var> {
        [Some(self.pred_ce), self.emb_target_ce, self.teacher_ce, self.hinge, self.emb_learn_ce]
            .into_iter()
            .flatten()
            .collect()
    }
}

/// `max(0, prob − alpha)` for `p = 1`, its square for `p = 2`.
pub fn hinge_regularizer(prob: f64, alpha: f64, p: u8) -> f64 {
    let d = (prob - alpha).max(0.0);
    if p == 2 {
        d * d
    } else {
        d
    }
}

fn check_logits<T: Scalar>(tape: &Tape<T>, z: Var, labels: &[usize], what: &str) -> Result<usize> {
    let shape = tape.value(z).shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::Dimension(format!(
            "{} has shape {:?} for {} labels",
            what,
            shape,
            labels.len()
        )));
    }
    let m = shape[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::Index { index: bad, len: m });
    }
    Ok(m)
}

fn one_hot<T: Scalar>(labels: &[usize], m: usize) -> Tensor<T> {
    let mut t = Tensor::zeros([labels.len(), m]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * m + y] = T::one();
    }
    t
}

/// Weighted sum of the present terms; returns the total handle and the
/// weighted component values.
fn combine<T: Scalar>(tape: &mut Tape<T>, terms: [Option<(Var, f64)>; 5]) -> Result<(Var, LossBreakdown)> {
    let mut total: Option<Var> = None;
    let mut values = [0.0; 5];
    for (slot, term) in values.iter_mut().zip(terms) {
        let Some((v, w)) = term else { continue };
        let scaled = if w == 1.0 { v } else { tape.scale(v, T::from_f64(w)) };
        *slot = tape.value(scaled).item()?.as_f64();
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
    }
    let total = total.expect("prediction term always present");
    Ok((total, LossBreakdown::from_components(values)))
}

/// One-hot cross entropy of the prediction head alone.
pub fn baseline_objective<T: Scalar>(tape: &mut Tape<T>, z1: Var, labels: &[usize]) -> Result<Objective> {
    let m = check_logits(tape, z1, labels, "z1")?;
    let y = tape.constant(one_hot(labels, m));
    let ce = tape.cross_entropy(y, z1)?;
    let pred_ce = tape.mean(ce);
    let (total, breakdown) = combine(tape, [Some((pred_ce, 1.0)), None, None, None, None])?;
    Ok(Objective { total, pred_ce, emb_target_ce: None, teacher_ce: None, hinge: None, emb_learn_ce: None, breakdown })
}

/// The full five-term objective.
///
/// `z2` must come from the teacher head fed by a stop-gradient copy of the
/// hidden vector; the model enforces that.
pub fn compute_objective<T: Scalar>(
    tape: &mut Tape<T>,
    z1: Var,
    z2: Var,
    labels: &[usize],
    emb: &BoundEmbedding,
    cfg: &ObjectiveConfig,
) -> Result<Objective> {
    cfg.validate()?;
    let m = check_logits(tape, z1, labels, "z1")?;
    let m2 = check_logits(tape, z2, labels, "z2")?;
    if m != m2 {
        return Err(Error::Dimension(format!("z1 has {} columns but z2 has {}", m, m2)));
    }
    let b = labels.len();
    let w = cfg.weights;

    let y = tape.constant(one_hot(labels, m));
    let ce = tape.cross_entropy(y, z1)?;
    let pred_ce = tape.mean(ce);

    let e = emb.rows(tape, labels)?;
    if tape.value(e).cols() != m {
        return Err(Error::Dimension(format!(
            "embedding has {} labels but logits have {}",
            tape.value(e).cols(),
            m
        )));
    }
    let soft = tape.softmax(e);
    let soft = tape.stop_gradient(soft);
    let ce = tape.cross_entropy(soft, z1)?;
    let emb_target_ce = tape.mean(ce);

    let ce = tape.cross_entropy(y, z2)?;
    let teacher_ce = tape.mean(ce);

    let p2 = tape.softmax(z2);
    let p_true = tape.pick(p2, labels)?;
    let h = tape.hinge(p_true, T::from_f64(cfg.alpha), cfg.p)?;
    let hinge = tape.mean(h);

    let z2c = tape.stop_gradient(z2);
    let target = tape.softmax_temperature(z2c, T::from_f64(cfg.tau))?;
    let per_example = tape.cross_entropy(target, e)?;
    let keep: Vec<bool> = if cfg.mask_wrong {
        let z1v = tape.value(z1);
        labels.iter().enumerate().map(|(i, &y)| argmax(z1v.row(i)) == y).collect()
    } else {
        vec![true; b]
    };
    let kept = keep.iter().filter(|&&k| k).count();
    let weights: Vec<T> = keep
        .iter()
        .map(|&k| if k { T::one() / T::from_f64(kept as f64) } else { T::zero() })
        .collect();
    let emb_learn_ce = tape.weighted_sum(per_example, &weights)?;

    let (total, breakdown) = combine(
        tape,
        [
            Some((pred_ce, w.pred_ce)),
            Some((emb_target_ce, w.emb_target_ce)),
            Some((teacher_ce, w.teacher_ce)),
            Some((hinge, w.hinge)),
            Some((emb_learn_ce, w.emb_learn_ce)),
        ],
    )?;
    Ok(Objective {
        total,
        pred_ce,
        emb_target_ce: Some(emb_target_ce),
        teacher_ce: Some(teacher_ce),
        hinge: Some(hinge),
        emb_learn_ce: Some(emb_learn_ce),
        breakdown,
    })
}

/// `H(y, σ z1) + H(σ e, σ z1)` against a fixed, previously learned embedding.
pub fn pretrained_objective<T: Scalar>(
    tape: &mut Tape<T>,
    z1: Var,
    labels: &[usize],
    emb: &BoundEmbedding,
) -> Result<Objective> {
    let m = check_logits(tape, z1, labels, "z1")?;
    let y = tape.constant(one_hot(labels, m));
    let ce = tape.cross_entropy(y, z1)?;
    let pred_ce = tape.mean(ce);

    let e = emb.rows(tape, labels)?;
    if tape.value(e).cols() != m {
        return Err(Error::Dimension(format!(
            "embedding has {} labels but logits have {}",
            tape.value(e).cols(),
            m
        )));
    }
    let soft = tape.softmax(e);
    let soft = tape.stop_gradient(soft);
    let ce = tape.cross_entropy(soft, z1)?;
    let emb_target_ce = tape.mean(ce);

    let (total, breakdown) = combine(tape, [Some((pred_ce, 1.0)), Some((emb_target_ce, 1.0)), None, None, None])?;
    Ok(Objective {
        total,
        pred_ce,
        emb_target_ce: Some(emb_target_ce),
        teacher_ce: None,
        hinge: None,
        emb_learn_ce: None,
        breakdown,
    })
}
