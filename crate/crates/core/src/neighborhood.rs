//! Total-differential analysis of compression noise.
//!
//! A perturbation of a layer's weights (`δ`) or of a layer's input (`ε`)
//! changes the mean loss by approximately `E[∂ℓ/∂w]·δ + E[∂ℓ/∂h]·ε` to first
//! order, plus `½ (ε,δ)ᵀℍ(ε,δ)` to second order. The gap between those
//! predictions and the loss change measured by re-running inference tells how
//! far the truncated expansion can be trusted.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{second_order_term, GradientProfile};
use crate::error::{Error, Result};
use crate::net::{loss_and_accuracy, per_sample_directional, per_sample_losses, Dataset, Model, Perturbations};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Weights,
    Activations,
}

/// Noise on one layer's weights or on one layer's input.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub target: Target,
    /// Layer position in evaluation order.
    pub layer: usize,
    pub values: Tensor,
    /// `max |values|`.
    pub magnitude: f64,
}

impl Perturbation {
    pub fn new(target: Target, layer: usize, values: Tensor) -> Self {
        let magnitude = values.abs_max();
        Self {
            target,
            layer,
            values,
            magnitude,
        }
    }

    /// Independent `±magnitude` entries shaped for `layer`'s weights or input.
    pub fn random<R: Rng>(model: &Model, target: Target, layer: usize, magnitude: f64, rng: &mut R) -> Result<Self> {
        let l = model.layer(layer)?;
        let shape = match target {
            Target::Weights => vec![l.out_dim(), l.in_dim()],
            Target::Activations => vec![l.in_dim()],
        };
        let values = Tensor::from_fn(&shape, |_| if rng.gen::<bool>() { magnitude } else { -magnitude });
        Ok(Self::new(target, layer, values))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(self.target, self.layer, self.values.scale(c))
    }

    pub fn negated(&self) -> Self {
        self.scaled(-1.0)
    }
}

/// Collects single-layer perturbations into a model-wide set; entries that hit
/// the same slot are summed.
pub fn to_perturbations(model: &Model, perts: &[Perturbation]) -> Result<Perturbations> {
    let mut set = Perturbations::none(model);
    for p in perts {
        let slot = match p.target {
            Target::Weights => set.weights.get_mut(p.layer),
            Target::Activations => set.activations.get_mut(p.layer),
        }
        .ok_or_else(|| Error::InvalidArgument(format!("perturbation layer {} out of range", p.layer)))?;
        *slot = Some(match slot.take() {
            Some(t) => t.add(&p.values)?,
            None => p.values.clone(),
        });
    }
    set.check(model)?;
    Ok(set)
}

/// First-order loss change `Σ E[∂ℓ/∂h]·ε + E[∂ℓ/∂w]·δ`.
pub fn predict_delta_first(profile: &GradientProfile, perts: &[Perturbation]) -> Result<f64> {
    let mut total = 0.0;
    for p in perts {
        let lp = profile
            .layers
            .get(p.layer)
            .ok_or_else(|| Error::InvalidArgument(format!("profile has no layer {}", p.layer)))?;
        let grad = match p.target {
            Target::Weights => &lp.mean_weight_grad,
            Target::Activations => &lp.mean_act_grad,
        };
        total += grad.dot(&p.values)?;
    }
    Ok(total)
}

/// First-order prediction for a model-wide perturbation set.
pub fn predict_delta_first_set(profile: &GradientProfile, set: &Perturbations) -> f64 {
    profile.as_perturbations().dot(set)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Order {
    First,
    Second,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapOptions {
    /// Average the per-sample gaps `|ℓ_s(w+δ) − ℓ_s(w) − prediction_s|`
    /// instead of taking the gap of the mean loss.
    pub per_sample: bool,
    /// Probe both `+δ` and `−δ` and report the larger gap.
    pub both_signs: bool,
}

/// Measured and predicted loss change for one perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapMeasurement {
    pub actual: f64,
    pub predicted_first: f64,
    pub predicted_second: f64,
    pub gap_first: f64,
    pub gap_second: f64,
}

impl GapMeasurement {
    pub fn gap(&self, order: Order) -> f64 {
        match order {
            Order::First => self.gap_first,
            Order::Second => self.gap_second,
        }
    }
}

fn measure_one(model: &Model, data: &Dataset, profile: &GradientProfile, pert: &Perturbation, opts: GapOptions) -> Result<GapMeasurement> {
    let set = to_perturbations(model, std::slice::from_ref(pert))?;
    if opts.per_sample {
        let base = per_sample_losses(model, data, None)?;
        let moved = per_sample_losses(model, data, Some(&set))?;
        let first = per_sample_directional(model, data, None, &set)?;
        // ½ vᵀℍ_s v = ½ (∇ℓ_s(hv)·v − ∇ℓ_s(−hv)·v) / 2h
        let h = crate::calibration::hvp_step(model);
        let origin = Perturbations::none(model);
        let up = per_sample_directional(model, data, Some(&origin.axpy(h, &set)), &set)?;
        let down = per_sample_directional(model, data, Some(&origin.axpy(-h, &set)), &set)?;
        let m = data.len() as f64;
        let mut out = GapMeasurement {
            actual: 0.0,
            predicted_first: 0.0,
            predicted_second: 0.0,
            gap_first: 0.0,
            gap_second: 0.0,
        };
        for s in 0..data.len() {
            let actual = moved[s] - base[s];
            let second = first[s] + 0.25 * (up[s] - down[s]) / h;
            out.actual += actual / m;
            out.predicted_first += first[s] / m;
            out.predicted_second += second / m;
            out.gap_first += (actual - first[s]).abs() / m;
            out.gap_second += (actual - second).abs() / m;
        }
        return Ok(out);
    }
    let base = loss_and_accuracy(model, data)?.0;
    let moved = crate::net::loss_and_accuracy_perturbed(model, data, Some(&set))?.0;
    let actual = moved - base;
    let predicted_first = predict_delta_first(profile, std::slice::from_ref(pert))?;
    let predicted_second = predicted_first + second_order_term(model, data, &set)?;
    Ok(GapMeasurement {
        actual,
        predicted_first,
        predicted_second,
        gap_first: (actual - predicted_first).abs(),
        gap_second: (actual - predicted_second).abs(),
    })
}

/// Measures the gap for a weight or activation perturbation. With
/// `both_signs`, the measurement with the larger first-order gap is returned.
pub fn measure_gap(
    model: &Model,
    data: &Dataset,
    profile: &GradientProfile,
    pert: &Perturbation,
    opts: GapOptions,
) -> Result<GapMeasurement> {
    profile.check(model)?;
    let m = measure_one(model, data, profile, pert, opts)?;
    if !opts.both_signs {
        return Ok(m);
    }
    let n = measure_one(model, data, profile, &pert.negated(), opts)?;
    Ok(if n.gap_first > m.gap_first { n } else { m })
}

/// Gap of the weight-noise expansion at the given order.
pub fn measure_gap_weights(
    model: &Model,
    data: &Dataset,
    profile: &GradientProfile,
    pert: &Perturbation,
    order: Order,
) -> Result<f64> {
    if pert.target != Target::Weights {
        return Err(Error::InvalidArgument("expected a weight perturbation".into()));
    }
    Ok(measure_gap(model, data, profile, pert, GapOptions::default())?.gap(order))
}

/// Gap of the activation-noise expansion at the given order. The noise is
/// added to every sample's input of `pert.layer`.
pub fn measure_gap_activations(
    model: &Model,
    data: &Dataset,
    profile: &GradientProfile,
    pert: &Perturbation,
    order: Order,
) -> Result<f64> {
    if pert.target != Target::Activations {
        return Err(Error::InvalidArgument("expected an activation perturbation".into()));
    }
    Ok(measure_gap(model, data, profile, pert, GapOptions::default())?.gap(order))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    FirstOrder,
    SecondOrder,
    HigherOrder,
}

/// Noise magnitudes separating the regimes: below `first_below` only the
/// gradient term matters, below `second_below` the Hessian term must be added,
/// and from there on higher orders contribute.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeThresholds {
    pub first_below: f64,
    pub second_below: f64,
}

impl RegimeThresholds {
    pub const ACTIVATIONS: RegimeThresholds = RegimeThresholds {
        first_below: 1e-3,
        second_below: 8e-2,
    };
    pub const WEIGHTS: RegimeThresholds = RegimeThresholds {
        first_below: 8e-3,
        second_below: 2e-1,
    };

    pub fn for_target(target: Target) -> Self {
        match target {
            Target::Weights => Self::WEIGHTS,
            Target::Activations => Self::ACTIVATIONS,
        }
    }

    /// Boundary values belong to the higher regime.
    pub fn classify(&self, magnitude: f64) -> Regime {
        if magnitude < self.first_below {
            Regime::FirstOrder
        } else if magnitude < self.second_below {
            Regime::SecondOrder
        } else {
            Regime::HigherOrder
        }
    }
}

pub fn classify_regime(target: Target, magnitude: f64) -> Result<Regime> {
    if !(magnitude >= 0.0) {
        return Err(Error::InvalidArgument(format!("magnitude must be >= 0, got {magnitude}")));
    }
    Ok(RegimeThresholds::for_target(target).classify(magnitude))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub layer: Option<usize>,
    pub target: Target,
    pub magnitude: f64,
    pub regime: Regime,
    pub gap_first: f64,
    pub gap_second: f64,
}

/// Chebyshev bound on the probability that `Σ eᵢpᵢ` lands on the opposite
/// side of zero from its mean, for independent `e` and `p`:
/// `Var(e)Var(p)/|EeEp|² + Var(e)/|Ee|² + Var(p)/|Ep|²`, clamped to `[0, 1]`.
pub fn chebyshev_bound(e_mean: f64, e_var: f64, p_mean: f64, p_var: f64) -> Result<f64> {
    if e_var < 0.0 || p_var < 0.0 {
        return Err(Error::InvalidArgument("variances must be >= 0".into()));
    }
    if e_mean == 0.0 {
        return Err(Error::ZeroMean("e"));
    }
    if p_mean == 0.0 {
        return Err(Error::ZeroMean("p"));
    }
    let (e2, p2) = (e_mean * e_mean, p_mean * p_mean);
    // Summing the two single-variance terms first keeps the result exactly
    // symmetric under swapping `e` and `p`.
    let raw = e_var * p_var / (e2 * p2) + (e_var / e2 + p_var / p2);
    Ok(raw.clamp(0.0, 1.0))
}
