//! Dice and cross-entropy terms on real and synthetic logit maps, and the
//! three ways of weighting them into one objective.
//!
//! Every term is a function of a [`LogitMap`]; the `*_with_grad` variants
//! also return the gradient with respect to the logits, which the segmenter
//! pulls back through the network.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::MaskMap;
use crate::segmenter::LogitMap;

pub const DEFAULT_DICE_EPS: f64 = 1e-5;
pub const DEFAULT_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Fixed weights: `lambda * L_seg + beta * L_uncertainty`.
    Balance,
    /// Each component divided by its own detached magnitude.
    Norm,
    /// Each secondary component rescaled to the detached magnitude of the
    /// real-prediction cross-entropy.
    Pareto,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Balance => "balance",
            Strategy::Norm => "norm",
            Strategy::Pareto => "pareto",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balance" => Ok(Strategy::Balance),
            "norm" => Ok(Strategy::Norm),
            "pareto" => Ok(Strategy::Pareto),
            other => Err(Error::Config(format!("unknown loss strategy {other:?}"))),
        }
    }
}

/// Loss weighting configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec {
    pub strategy: Strategy,
    pub lambda: f64,
    /// Weight of the uncertainty term. Zero removes the term entirely, under
    /// every strategy.
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub dice_eps: f64,
    pub norm_eps: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            strategy: Strategy::Balance,
            lambda: 1.0,
            beta: 1.0,
            lambda1: 0.5,
            lambda2: 0.5,
            beta1: 0.5,
            beta2: 0.5,
            dice_eps: DEFAULT_DICE_EPS,
            norm_eps: DEFAULT_NORM_EPS,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("dice_eps", self.dice_eps),
            ("norm_eps", self.norm_eps),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Softmax per pixel, stabilized by the pixel maximum.
pub fn softmax(logits: &LogitMap) -> Vec<f64> {
    let k = logits.k();
    let mut out = Vec::with_capacity(logits.values().len());
    for px in logits.values().chunks_exact(k) {
        let max = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &z in px {
            let e = (z - max).exp();
            sum += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p /= sum;
        }
    }
    out
}

/// Probability of "not background" per pixel.
pub fn foreground_probs(probs: &[f64], k: usize) -> Vec<f64> {
    probs.chunks_exact(k).map(|px| px[1..].iter().sum()).collect()
}

fn check_shapes(logits: &LogitMap, target: &MaskMap) -> Result<()> {
    if logits.height() != target.height() || logits.width() != target.width() {
        return Err(Error::Shape(format!(
            "logits are {}x{}, target is {}x{}",
            logits.height(),
            logits.width(),
            target.height(),
            target.width()
        )));
    }
    target.validate(logits.k())
}

/// Soft Dice loss on foreground probabilities against a binary target.
pub fn dice_loss(fg_probs: &[f64], target: &MaskMap, eps: f64) -> Result<f64> {
    if fg_probs.len() != target.labels().len() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} pixels",
            fg_probs.len(),
            target.labels().len()
        )));
    }
    let (mut inter, mut pp, mut gg) = (0.0, 0.0, 0.0);
    for (&p, &l) in fg_probs.iter().zip(target.labels()) {
        let g = if l != 0 { 1.0 } else { 0.0 };
        inter += p * g;
        pp += p * p;
        gg += g;
    }
    Ok(1.0 - (2.0 * inter + eps) / (pp + gg + eps))
}

/// Mean per-pixel cross-entropy of the true class.
pub fn ce_loss(logits: &LogitMap, target: &MaskMap) -> Result<f64> {
    check_shapes(logits, target)?;
    let k = logits.k();
    let mut total = 0.0;
    for (px, &y) in logits.values().chunks_exact(k).zip(target.labels()) {
        let max = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + px.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - px[usize::from(y)];
    }
    Ok(total / target.labels().len() as f64)
}

/// `lambda1 * CE + lambda2 * Dice` on a logit map.
pub fn seg_loss(logits: &LogitMap, target: &MaskMap, lambda1: f64, lambda2: f64, dice_eps: f64) -> Result<f64> {
    let ce = ce_loss(logits, target)?;
    let probs = softmax(logits);
    let dice = dice_loss(&foreground_probs(&probs, logits.k()), target, dice_eps)?;
    Ok(lambda1 * ce + lambda2 * dice)
}

/// The same functional form as [`seg_loss`], evaluated on a synthetic map
/// whose pixels were partly replaced by virtual outliers.
pub fn uncertainty_loss(synthetic: &LogitMap, target: &MaskMap, beta1: f64, beta2: f64, dice_eps: f64) -> Result<f64> {
    seg_loss(synthetic, target, beta1, beta2, dice_eps)
}

/// CE and Dice values of one logit map together with their logit gradients.
#[derive(Debug, Clone)]
pub struct TermGrads {
    pub ce: f64,
    pub dice: f64,
    pub grad_ce: Vec<f64>,
    pub grad_dice: Vec<f64>,
}

pub fn terms_with_grad(logits: &LogitMap, target: &MaskMap, dice_eps: f64) -> Result<TermGrads> {
    check_shapes(logits, target)?;
    let k = logits.k();
    let n = target.labels().len();
    let probs = softmax(logits);
    let fg = foreground_probs(&probs, k);

    let ce = ce_loss(logits, target)?;
    let inv_n = 1.0 / n as f64;
    let mut grad_ce = probs.clone();
    for (px, &y) in grad_ce.chunks_exact_mut(k).zip(target.labels()) {
        px[usize::from(y)] -= 1.0;
        for g in px {
            *g *= inv_n;
        }
    }

    let (mut inter, mut pp, mut gg) = (0.0, 0.0, 0.0);
    for (&p, &l) in fg.iter().zip(target.labels()) {
        let g = if l != 0 { 1.0 } else { 0.0 };
        inter += p * g;
        pp += p * p;
        gg += g;
    }
    let num = 2.0 * inter + dice_eps;
    let den = pp + gg + dice_eps;
    let dice = 1.0 - num / den;

    // dL/dp_i = (2 p_i num - 2 g_i den) / den^2, then through
    // dp_fg/dz_j = [j >= 1] p_j - p_fg p_j.
    let den2 = den * den;
    let mut grad_dice = vec![0.0; probs.len()];
    for (i, ((gpx, ppx), &l)) in grad_dice
        .chunks_exact_mut(k)
        .zip(probs.chunks_exact(k))
        .zip(target.labels())
        .enumerate()
    {
        let g = if l != 0 { 1.0 } else { 0.0 };
        let dl_dp = (2.0 * fg[i] * num - 2.0 * g * den) / den2;
        for (j, (gz, &pj)) in gpx.iter_mut().zip(ppx).enumerate() {
            let indicator = if j >= 1 { pj } else { 0.0 };
            *gz = dl_dp * (indicator - fg[i] * pj);
        }
    }

    Ok(TermGrads {
        ce,
        dice,
        grad_ce,
        grad_dice,
    })
}

/// Raw component values. The outlier components are absent while synthesis
/// is inactive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub ce: f64,
    pub dice: f64,
    pub ce_out: Option<f64>,
    pub dice_out: Option<f64>,
}

impl LossComponents {
    pub fn real(ce: f64, dice: f64) -> Self {
        Self {
            ce,
            dice,
            ce_out: None,
            dice_out: None,
        }
    }

    fn as_array(&self) -> [Option<f64>; 4] {
        [Some(self.ce), Some(self.dice), self.ce_out, self.dice_out]
    }
}

/// A combined objective and the constant per-component multipliers that
/// produce it: `value = sum_i weights[i] * L_i` (for `balance`, up to the
/// grouping of the sums).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Combination {
    pub value: f64,
    /// Multipliers for (CE, Dice, CE_out, Dice_out); zero for absent terms.
    pub weights: [f64; 4],
    /// Strategy actually applied; `pareto` falls back to `norm` when the
    /// primary cross-entropy is zero.
    pub applied: Strategy,
}

fn norm_weights(c: &[Option<f64>; 4], eps: f64) -> [f64; 4] {
    c.map(|l| l.map_or(0.0, |l| 1.0 / (l.abs() + eps)))
}

pub fn combine(components: &LossComponents, spec: &LossSpec) -> Result<Combination> {
    let c = components.as_array();
    for (name, v) in ["ce", "dice", "ce_out", "dice_out"].iter().zip(c) {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::non_finite(*name));
            }
        }
    }
    let weighted_sum = |w: &[f64; 4]| -> f64 {
        c.iter()
            .zip(w)
            .filter_map(|(l, w)| l.map(|l| w * l))
            .sum()
    };
    let mut applied = spec.strategy;
    let (value, weights) = match spec.strategy {
        Strategy::Balance => {
            let seg = spec.lambda1 * components.ce + spec.lambda2 * components.dice;
            let mut value = spec.lambda * seg;
            let mut w = [spec.lambda * spec.lambda1, spec.lambda * spec.lambda2, 0.0, 0.0];
            if components.ce_out.is_some() || components.dice_out.is_some() {
                let unc = spec.beta1 * components.ce_out.unwrap_or(0.0)
                    + spec.beta2 * components.dice_out.unwrap_or(0.0);
                value += spec.beta * unc;
                w[2] = if components.ce_out.is_some() { spec.beta * spec.beta1 } else { 0.0 };
                w[3] = if components.dice_out.is_some() { spec.beta * spec.beta2 } else { 0.0 };
            }
            (value, w)
        }
        Strategy::Norm => {
            let w = norm_weights(&c, spec.norm_eps);
            (weighted_sum(&w), w)
        }
        Strategy::Pareto => {
            let primary = components.ce.abs();
            if primary == 0.0 {
                applied = Strategy::Norm;
                let w = norm_weights(&c, spec.norm_eps);
                (weighted_sum(&w), w)
            } else {
                let mut w = [1.0, 0.0, 0.0, 0.0];
                let mut value = components.ce;
                for i in 1..4 {
                    if let Some(l) = c[i] {
                        // A zero secondary contributes nothing either way.
                        if l != 0.0 {
                            w[i] = 1.0 / (l / components.ce).abs();
                            value += l / (l / components.ce).abs();
                        }
                    }
                }
                (value, w)
            }
        }
    };
    if !value.is_finite() {
        return Err(Error::non_finite("combined"));
    }
    Ok(Combination {
        value,
        weights,
        applied,
    })
}

/// One evaluation of the objective, with enough detail to re-derive
/// `combined` from the components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub dice: f64,
    /// Zero while synthesis is inactive.
    pub ce_out: f64,
    pub dice_out: f64,
    pub combined: f64,
    pub strategy: Strategy,
    pub uncertainty_active: bool,
    pub lambda: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl LossReport {
    pub fn new(components: &LossComponents, combination: &Combination, spec: &LossSpec) -> Self {
        Self {
            ce: components.ce,
            dice: components.dice,
            ce_out: components.ce_out.unwrap_or(0.0),
            dice_out: components.dice_out.unwrap_or(0.0),
            combined: combination.value,
            strategy: combination.applied,
            uncertainty_active: components.ce_out.is_some(),
            lambda: spec.lambda,
            beta: spec.beta,
            lambda1: spec.lambda1,
            lambda2: spec.lambda2,
            beta1: spec.beta1,
            beta2: spec.beta2,
        }
    }

    pub fn components(&self) -> LossComponents {
        LossComponents {
            ce: self.ce,
            dice: self.dice,
            ce_out: self.uncertainty_active.then_some(self.ce_out),
            dice_out: self.uncertainty_active.then_some(self.dice_out),
        }
    }

    /// Recomputes the combined value from the stored components.
    pub fn recombine(&self, norm_eps: f64) -> Result<f64> {
        let spec = LossSpec {
            strategy: self.strategy,
            lambda: self.lambda,
            beta: self.beta,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            beta1: self.beta1,
            beta2: self.beta2,
            dice_eps: DEFAULT_DICE_EPS,
            norm_eps,
        };
        combine(&self.components(), &spec).map(|c| c.value)
    }

    /// Component-wise mean of several reports sharing one configuration.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        let first = *reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(LossReport {
            ce: avg(|r| r.ce),
            dice: avg(|r| r.dice),
            ce_out: avg(|r| r.ce_out),
            dice_out: avg(|r| r.dice_out),
            combined: avg(|r| r.combined),
            uncertainty_active: reports.iter().any(|r| r.uncertainty_active),
            ..first
        })
    }
}
