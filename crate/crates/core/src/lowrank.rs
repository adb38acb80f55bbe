//! Rank search for dense layers under a Frobenius residual budget and a
//! gradient-sign condition on the residual.
//!
//! Each weight `W` (`N×M`) is factored through a truncated SVD as
//! `L = U_r·diag(√σ)`, `R = diag(√σ)·V_rᵀ`. A rank is accepted when
//! `‖LR − W‖_F ≤ γ` and `E[∂ℓ/∂W]·(LR − W) < 0`, and among accepted ranks
//! the one with the lowest measured calibration loss wins.

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::GradientProfile;
use crate::error::{Error, Result};
use crate::net::{loss_and_accuracy, Dataset, DenseLayer, LayerWeight, Model};
use crate::tensor::Tensor;

/// Layers with a smaller side than this are never factored.
pub const MIN_ELIGIBLE_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorPair {
    /// `N × r`
    pub left: Tensor,
    /// `r × M`
    pub right: Tensor,
    pub rank: usize,
    pub residual_fro: f64,
    /// `L·R − W`
    pub delta: Tensor,
}

/// Largest `r` with `r·(N + M) < N·M`; 0 when no rank saves space.
pub fn rank_cap(n: usize, m: usize) -> usize {
    if n == 0 || m == 0 {
        return 0;
    }
    (n * m - 1) / (n + m)
}

/// Singular triplets sorted by decreasing singular value; `v` holds the
/// right singular vectors as columns.
struct Svd {
    u: Mat<f64>,
    sigma: Vec<f64>,
    v: Mat<f64>,
}

fn svd_sorted(w: &Tensor) -> Result<Svd> {
    if !w.is_matrix() {
        return Err(Error::Shape(format!("expected a matrix, got {:?}", w.shape())));
    }
    let (n, m) = (w.rows(), w.cols());
    let mat = Mat::from_fn(n, m, |i, j| w.data()[i * m + j]);
    let svd = mat
        .thin_svd()
        .map_err(|e| Error::NonFinite(format!("SVD did not converge: {e:?}")))?;
    let s = svd.S().column_vector();
    let mut order: Vec<usize> = (0..s.nrows()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let sigma = order.iter().map(|&i| s[i]).collect();
    let (u, v) = (svd.U(), svd.V());
    let u = Mat::from_fn(n, order.len(), |r, c| u[(r, order[c])]);
    let v = Mat::from_fn(m, order.len(), |r, c| v[(r, order[c])]);
    Ok(Svd { u, sigma, v })
}

impl Svd {
    fn factor(&self, w: &Tensor, r: usize) -> Result<FactorPair> {
        let (n, m) = (self.u.nrows(), self.v.nrows());
        let mut left = Vec::with_capacity(n * r);
        for i in 0..n {
            for k in 0..r {
                left.push(self.u[(i, k)] * self.sigma[k].sqrt());
            }
        }
        let mut right = Vec::with_capacity(r * m);
        for k in 0..r {
            let s = self.sigma[k].sqrt();
            for j in 0..m {
                right.push(s * self.v[(j, k)]);
            }
        }
        let left = Tensor::matrix(n, r, left)?;
        let right = Tensor::matrix(r, m, right)?;
        let delta = left.matmul(&right)?.sub(w)?;
        Ok(FactorPair {
            residual_fro: delta.norm_l2(),
            left,
            right,
            rank: r,
            delta,
        })
    }
}

/// Rank-`r` truncated SVD of `w` with the singular values split evenly.
pub fn low_rank_factor(w: &Tensor, r: usize) -> Result<FactorPair> {
    if !w.is_matrix() {
        return Err(Error::Shape(format!("expected a matrix, got {:?}", w.shape())));
    }
    let max = w.rows().min(w.cols());
    if r == 0 || r > max {
        return Err(Error::InvalidArgument(format!("rank {r} outside 1..={max}")));
    }
    svd_sorted(w)?.factor(w, r)
}

/// `E[∂ℓ/∂W] · δ` for layer `layer`.
pub fn sign_condition(profile: &GradientProfile, layer: usize, delta: &Tensor) -> Result<f64> {
    let g = &profile
        .layers
        .get(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("no profile for layer {layer}")))?
        .mean_weight_grad;
    if g.shape() != delta.shape() {
        return Err(Error::DimensionMismatch {
            layer,
            expected: g.len(),
            got: delta.len(),
        });
    }
    g.dot(delta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposeConfig {
    pub gamma: f64,
    /// Read `gamma` as a fraction of `‖W‖_F` instead of an absolute bound.
    pub relative_gamma: bool,
    /// Upper bound on searched ranks; clamped to each layer's size cap.
    pub rank_max: Option<usize>,
    /// Residuals below this stop the search.
    pub early_stop_tol: f64,
    /// Stop at the lowest accepted rank whose measured loss does not exceed
    /// the layer's starting loss, instead of taking the minimum-loss rank.
    pub stop_at_first_lossless: bool,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self {
            gamma: 1e-4,
            relative_gamma: false,
            rank_max: None,
            early_stop_tol: 1e-9,
            stop_at_first_lossless: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub rank: usize,
    pub residual_fro: f64,
    pub sign_value: f64,
    pub accepted: bool,
    /// Calibration loss with this candidate in place; only measured for
    /// candidates that pass both conditions.
    pub measured_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSearchTrace {
    pub layer: usize,
    pub gamma_abs: f64,
    pub cap: usize,
    /// Rank at which the search stopped: the residual fell below the
    /// early-stop tolerance, or (in first-lossless mode) the first lossless
    /// candidate.
    pub early_stop: Option<usize>,
    pub candidates: Vec<CandidateRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDecomposition {
    pub best: Option<FactorPair>,
    pub trace: RankSearchTrace,
}

fn with_factored(model: &Model, layer: usize, pair: &FactorPair) -> Result<Model> {
    let mut m = model.clone();
    let l = &mut m.layers_mut()[layer];
    l.weight = LayerWeight::Factored {
        left: pair.left.clone(),
        right: pair.right.clone(),
    };
    l.weight_bits = None;
    Ok(m)
}

/// Searches ranks `1..=rank_max` for one dense layer.
///
/// Residuals and sign values come from the singular triplets:
/// `δ_r = −Σ_{i>r} σ_i u_i v_iᵀ`, so `‖δ_r‖² = Σ_{i>r} σ_i²` and
/// `G·δ_r = −Σ_{i>r} σ_i u_iᵀ G v_i`. Candidates inside the budget are then
/// built explicitly and their recomputed residual and sign are what get
/// recorded and tested.
///
/// When the residual is below `early_stop_tol` the factorisation is exact up
/// to roundoff and the sign of `G·δ` carries no information, so such a
/// candidate is accepted on the residual alone.
pub fn decompose_layer(
    model: &Model,
    layer: usize,
    profile: &GradientProfile,
    cfg: &DecomposeConfig,
    data: &Dataset,
) -> Result<LayerDecomposition> {
    profile.check(model)?;
    if !(cfg.gamma >= 0.0) || !cfg.gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {}", cfg.gamma)));
    }
    let l = model.layer(layer)?;
    let w = l
        .dense_weight()
        .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} is already factored")))?;
    let (n, m) = (w.rows(), w.cols());
    let cap = rank_cap(n, m);
    let rank_max = cfg.rank_max.unwrap_or(cap).min(cap);
    let gamma_abs = if cfg.relative_gamma { cfg.gamma * w.norm_l2() } else { cfg.gamma };
    let mut trace = RankSearchTrace {
        layer,
        gamma_abs,
        cap,
        early_stop: None,
        candidates: Vec::new(),
    };
    if rank_max == 0 {
        return Ok(LayerDecomposition { best: None, trace });
    }

    let svd = svd_sorted(w)?;
    let g = &profile.layers[layer].mean_weight_grad;
    let q = svd.sigma.len();
    // coupling[i] = σ_i · u_iᵀ G v_i
    let coupling: Vec<f64> = (0..q)
        .map(|i| {
            let uv: f64 = (0..n)
                .map(|r| svd.u[(r, i)] * (0..m).map(|c| g.data()[r * m + c] * svd.v[(c, i)]).sum::<f64>())
                .sum();
            svd.sigma[i] * uv
        })
        .collect();
    let mut tail_sq = vec![0.0; q + 1];
    let mut tail_sign = vec![0.0; q + 1];
    for i in (0..q).rev() {
        tail_sq[i] = tail_sq[i + 1] + svd.sigma[i] * svd.sigma[i];
        tail_sign[i] = tail_sign[i + 1] - coupling[i];
    }

    let mut last = rank_max;
    for r in 1..=rank_max {
        if tail_sq[r].sqrt() < cfg.early_stop_tol {
            last = r;
            break;
        }
    }
    // Slack so borderline ranks are decided on the recomputed residual.
    let slack = 1e-12 * (1.0 + tail_sq[0].sqrt());
    let ranks: Vec<usize> = (1..=last).collect();
    let evaluated: Vec<(CandidateRecord, Option<FactorPair>)> = ranks
        .par_iter()
        .map(|&r| -> Result<_> {
            let approx_res = tail_sq[r].sqrt();
            if approx_res > gamma_abs + slack && approx_res >= cfg.early_stop_tol + slack {
                return Ok((
                    CandidateRecord {
                        rank: r,
                        residual_fro: approx_res,
                        sign_value: tail_sign[r],
                        accepted: false,
                        measured_loss: None,
                    },
                    None,
                ));
            }
            let pair = svd.factor(w, r)?;
            let sign_value = g.dot(&pair.delta)?;
            let exact = pair.residual_fro < cfg.early_stop_tol;
            let accepted = pair.residual_fro <= gamma_abs && (sign_value < 0.0 || exact);
            let measured_loss = if accepted {
                Some(loss_and_accuracy(&with_factored(model, layer, &pair)?, data)?.0)
            } else {
                None
            };
            Ok((
                CandidateRecord {
                    rank: r,
                    residual_fro: pair.residual_fro,
                    sign_value,
                    accepted,
                    measured_loss,
                },
                accepted.then_some(pair),
            ))
        })
        .collect::<Result<_>>()?;

    let base_loss = if cfg.stop_at_first_lossless {
        loss_and_accuracy(model, data)?.0
    } else {
        f64::NAN
    };
    let mut best: Option<(f64, FactorPair)> = None;
    for (rec, pair) in evaluated {
        if cfg.stop_at_first_lossless {
            if let (Some(loss), Some(pair)) = (rec.measured_loss, &pair) {
                if loss <= base_loss {
                    trace.early_stop = Some(rec.rank);
                    trace.candidates.push(rec);
                    best = Some((loss, pair.clone()));
                    break;
                }
            }
        }
        if rec.residual_fro < cfg.early_stop_tol && trace.early_stop.is_none() {
            trace.early_stop = Some(rec.rank);
        }
        if let (Some(loss), Some(pair)) = (rec.measured_loss, pair) {
            // Ranks arrive in increasing order, so `<` keeps the lower rank on ties.
            if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                best = Some((loss, pair));
            }
        }
        trace.candidates.push(rec);
    }
    Ok(LayerDecomposition {
        best: best.map(|(_, p)| p),
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerChoice {
    pub layer: usize,
    pub outer_index: usize,
    pub shape: [usize; 2],
    pub eligible: bool,
    pub rank: Option<usize>,
    pub trace: Option<RankSearchTrace>,
}

#[derive(Clone, Debug)]
pub struct ModelDecomposition {
    pub model: Model,
    pub layers: Vec<LayerChoice>,
}

/// Runs the rank search over every dense layer in evaluation order,
/// substituting each accepted factorisation before moving on.
pub fn decompose_model(
    model: &Model,
    profile: &GradientProfile,
    cfg: &DecomposeConfig,
    data: &Dataset,
) -> Result<ModelDecomposition> {
    profile.check(model)?;
    data.check_compatible(model)?;
    let mut current = model.clone();
    let mut layers = Vec::with_capacity(model.num_layers());
    for k in 0..model.num_layers() {
        let l: &DenseLayer = current.layer(k)?;
        let shape = [l.out_dim(), l.in_dim()];
        let eligible = !l.is_factored() && shape[0].min(shape[1]) >= MIN_ELIGIBLE_SIDE;
        let mut choice = LayerChoice {
            layer: k,
            outer_index: model.outer_index(k),
            shape,
            eligible,
            rank: None,
            trace: None,
        };
        if eligible {
            let out = decompose_layer(&current, k, profile, cfg, data)?;
            if let Some(pair) = out.best {
                let (n, m) = (shape[0], shape[1]);
                if pair.rank * (n + m) < n * m {
                    current = with_factored(&current, k, &pair)?;
                    choice.rank = Some(pair.rank);
                }
            }
            choice.trace = Some(out.trace);
        }
        log::debug!("layer {k}: rank {:?}", choice.rank);
        layers.push(choice);
    }
    Ok(ModelDecomposition { model: current, layers })
}
