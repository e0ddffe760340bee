//! Rewards and the bound test.

use crate::victims::{
    match_confidences, object_count, predicted_class, ClassifierOutput, Detection, DetectorOutput,
};

/// Floor on `|r*|` in the bound test so that `r* ≤ 0` stays well defined.
pub const BOUND_GUARD: f64 = 1e-8;

/// `f_y(x) − f_y(x̄) + Ω`, with `Ω = 1` when the prediction moved off `y`.
pub fn reward_classification(clean: &ClassifierOutput, perturbed: &ClassifierOutput, label: usize) -> f64 {
    let flipped = predicted_class(perturbed) != label;
    clean.prob(label) - perturbed.prob(label) + if flipped { 1.0 } else { 0.0 }
}

/// `Σ_o (f^o(x) − f^o(x̄)) + (n(x) − n(x̄))` over the clean objects.
pub fn reward_detection(clean: &[Detection], new_out: &DetectorOutput) -> f64 {
    let matched = match_confidences(clean, new_out);
    let drop: f64 = clean
        .iter()
        .zip(&matched)
        .map(|(o, &m)| o.confidence - m)
        .sum();
    drop + clean.len() as f64 - object_count(new_out) as f64
}

/// True when the relative gain over the stored best is below `eta`.
pub fn bound_check(reward: f64, best: f64, eta: f64) -> bool {
    (reward - best) / best.abs().max(BOUND_GUARD) < eta
}
