//! Gradient statistics over a calibration set, gathered without touching the
//! weights, plus Hessian-vector products by central differences of gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{batch_gradients, batch_gradients_gated, Dataset, Model, Perturbations};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    /// Mean `∂ℓ/∂W` over the calibration samples, `[out × in]`.
    pub mean_weight_grad: Tensor,
    /// Mean `∂ℓ/∂h` for the layer input, `[in]`.
    pub mean_act_grad: Tensor,
    /// `mean_act_grad · 1`, i.e. `k · E[p]` for a `k`-wide input.
    pub grad_dot_one: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientProfile {
    /// Indexed like [`Model::layers`].
    pub layers: Vec<LayerProfile>,
    pub sample_count: usize,
    pub mean_loss: f64,
}

impl GradientProfile {
    pub fn check(&self, model: &Model) -> Result<()> {
        if self.layers.len() != model.num_layers() {
            return Err(Error::Shape(format!(
                "profile covers {} layers, model has {}",
                self.layers.len(),
                model.num_layers()
            )));
        }
        for (k, (p, l)) in self.layers.iter().zip(model.layers()).enumerate() {
            if p.mean_weight_grad.shape() != [l.out_dim(), l.in_dim()] || p.mean_act_grad.shape() != [l.in_dim()] {
                return Err(Error::Shape(format!("profile layer {k} does not match the model")));
            }
        }
        Ok(())
    }

    /// The profile's mean gradients as a perturbation-shaped vector.
    pub fn as_perturbations(&self) -> Perturbations {
        Perturbations {
            activations: self.layers.iter().map(|l| Some(l.mean_act_grad.clone())).collect(),
            weights: self.layers.iter().map(|l| Some(l.mean_weight_grad.clone())).collect(),
        }
    }
}

/// Averages per-sample gradients over `data`. The model is only read.
pub fn calibrate(model: &Model, data: &Dataset) -> Result<GradientProfile> {
    let g = batch_gradients(model, data, None)?;
    let layers = g
        .weights
        .into_iter()
        .zip(g.activations)
        .map(|(w, a)| LayerProfile {
            grad_dot_one: a.sum(),
            mean_weight_grad: w,
            mean_act_grad: a,
        })
        .collect();
    Ok(GradientProfile {
        layers,
        sample_count: data.len(),
        mean_loss: g.loss,
    })
}

/// Central-difference Hessian-vector product of a gradient map:
/// `(∇f(x + h·v) − ∇f(x − h·v)) / 2h`.
pub fn finite_difference_hvp<F>(grad: F, x: &[f64], v: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if x.len() != v.len() {
        return Err(Error::Shape("hvp: point and direction differ in length".into()));
    }
    let plus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
    let gp = grad(&plus)?;
    let gm = grad(&minus)?;
    let out: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Hessian-vector product".into()));
    }
    Ok(out)
}

/// Step used for model HVPs: `1e-4 · (1 + ‖w‖∞)` over all weights.
pub fn hvp_step(model: &Model) -> f64 {
    let wmax = model
        .layers()
        .iter()
        .map(|l| l.effective_weight().abs_max())
        .fold(0.0, f64::max);
    1e-4 * (1.0 + wmax)
}

/// Gradient of the mean loss with respect to a perturbation point, laid out
/// like `template` (entries missing from `template` are left out). ReLU gates
/// stay as at the unperturbed point, so a sample whose pre-activation crosses
/// zero inside `±h·v` does not inject its gradient jump into the difference.
fn gradient_like(model: &Model, data: &Dataset, at: &Perturbations, template: &Perturbations) -> Result<Perturbations> {
    let g = batch_gradients_gated(model, data, at)?;
    let pick = |src: &[Tensor], mask: &[Option<Tensor>]| -> Vec<Option<Tensor>> {
        src.iter()
            .zip(mask)
            .map(|(g, m)| m.as_ref().map(|_| g.clone()))
            .collect()
    };
    Ok(Perturbations {
        activations: pick(&g.activations, &template.activations),
        weights: pick(&g.weights, &template.weights),
    })
}

/// `ℍv` of the mean loss over `data`, jointly in layer-input shifts and
/// weights, restricted to the entries present in `direction`. The central
/// difference runs on the smooth piece holding the unperturbed point, which
/// is the Hessian wherever the loss is twice differentiable.
pub fn hessian_vector_product(model: &Model, data: &Dataset, direction: &Perturbations) -> Result<Perturbations> {
    direction.check(model)?;
    if direction.is_zero() {
        return Ok(direction.scale(0.0));
    }
    let h = hvp_step(model);
    let origin = Perturbations::none(model);
    let plus = gradient_like(model, data, &origin.axpy(h, direction), direction)?;
    let minus = gradient_like(model, data, &origin.axpy(-h, direction), direction)?;
    let hv = plus.axpy(-1.0, &minus).scale(1.0 / (2.0 * h));
    let finite = hv
        .activations
        .iter()
        .chain(&hv.weights)
        .flatten()
        .all(|t| t.data().iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::NonFinite("Hessian-vector product".into()));
    }
    Ok(hv)
}

/// `½ vᵀℍv` for the joint activation/weight perturbation `v`.
pub fn second_order_term(model: &Model, data: &Dataset, pert: &Perturbations) -> Result<f64> {
    let hv = hessian_vector_product(model, data, pert)?;
    Ok(0.5 * pert.dot(&hv))
}
