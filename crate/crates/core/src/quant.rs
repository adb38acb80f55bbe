//! Simulated uniform quantization with sign-controlled rounding error.
//!
//! Values are snapped to the symmetric grid `{m · scale : |m| ≤ 2^(bits−1) − 1}`
//! but kept as `f64`. Rounding is one-sided: [`Direction::Positive`] rounds
//! toward +∞ so every element's error `q − x` lies in `[0, scale)`, and
//! [`Direction::Negative`] rounds toward −∞ so it lies in `(−scale, 0]`. The
//! direction for a layer is picked so that the mean activation error has the
//! opposite sign to the mean activation gradient, which makes the first-order
//! loss change negative.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::GradientProfile;
use crate::error::{Error, Result};
use crate::net::{forward, loss_and_accuracy, Dataset, LayerWeight, Model, Perturbations};
use crate::tensor::Tensor;

pub const ALLOWED_BITS: [u32; 4] = [2, 4, 8, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuantLevel {
    Bits(u32),
    FullPrecision,
}

impl QuantLevel {
    pub fn bits(bits: u32) -> Result<Self> {
        if ALLOWED_BITS.contains(&bits) {
            Ok(QuantLevel::Bits(bits))
        } else {
            Err(Error::InvalidArgument(format!(
                "unsupported bit width {bits}, expected one of {ALLOWED_BITS:?}"
            )))
        }
    }

    pub fn bit_width(self) -> Option<u32> {
        match self {
            QuantLevel::Bits(b) => Some(b),
            QuantLevel::FullPrecision => None,
        }
    }

    /// Stored bytes for `count` weights at this level.
    pub fn bytes_for(self, count: usize) -> u64 {
        match self {
            QuantLevel::Bits(b) => (count as u64 * b as u64).div_ceil(8),
            QuantLevel::FullPrecision => 8 * count as u64,
        }
    }

    /// The default search space: full precision, 16, 8 and 4 bits.
    pub fn default_levels() -> Vec<QuantLevel> {
        vec![
            QuantLevel::FullPrecision,
            QuantLevel::Bits(16),
            QuantLevel::Bits(8),
            QuantLevel::Bits(4),
        ]
    }
}

impl fmt::Display for QuantLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantLevel::Bits(b) => write!(f, "{b}"),
            QuantLevel::FullPrecision => write!(f, "fp"),
        }
    }
}

impl FromStr for QuantLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fp" | "full" | "f" | "64" => Ok(QuantLevel::FullPrecision),
            other => {
                let bits: u32 = other
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad quantization level {s:?}")))?;
                QuantLevel::bits(bits)
            }
        }
    }
}

/// How the clipping range of a tensor is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    /// Clip at `max |t|`; nothing is ever clamped.
    #[default]
    AbsMax,
    /// Clip at `α*(bits) · b̂`, the Laplace-optimal clipping value for the
    /// fitted Laplace scale `b̂ = mean |t − median(t)|`.
    Aciq,
}

/// Largest grid index `2^(bits−1) − 1`.
pub fn grid_limit(bits: u32) -> f64 {
    ((1u64 << (bits - 1)) - 1) as f64
}

/// Grid step for `values`. Returns `0.0` for an all-zero tensor, which callers
/// treat as full precision.
pub fn compute_scale(values: &[f64], bits: u32, mode: ScaleMode) -> Result<f64> {
    QuantLevel::bits(bits)?;
    let absmax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if absmax == 0.0 {
        return Ok(0.0);
    }
    let limit = grid_limit(bits);
    let clip = match mode {
        ScaleMode::AbsMax => absmax,
        ScaleMode::Aciq => {
            let b = laplace_scale(values);
            if b == 0.0 {
                absmax
            } else {
                (laplace_optimal_clip(bits) * b).min(absmax)
            }
        }
    };
    let mut scale = clip / limit;
    // Keep the largest value inside the grid despite rounding in the division.
    while scale * limit < clip {
        scale = scale.next_up();
    }
    Ok(scale)
}

/// Maximum-likelihood Laplace scale `mean |t − median(t)|`.
pub fn laplace_scale(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    values.iter().map(|v| (v - median).abs()).sum::<f64>() / n as f64
}

/// `∫_{−h}^{h} u² e^{−u} du` by its even power series (stable for small `h`).
fn centered_moment(h: f64) -> f64 {
    let mut total = 0.0;
    let mut fact = 1.0; // n!
    let mut n = 0u32;
    loop {
        if n > 0 {
            fact *= (n - 1) as f64 * n as f64;
        }
        let term = 2.0 * h.powi(n as i32 + 3) / ((n + 3) as f64 * fact);
        total += term;
        if term < 1e-300 || term < total * 1e-18 {
            break;
        }
        n += 2;
    }
    total
}

/// `∫_0^{h} u² e^{−u} du` by its power series.
fn half_moment(h: f64) -> f64 {
    let mut total = 0.0;
    let mut fact = 1.0;
    let mut n = 0u32;
    loop {
        if n > 0 {
            fact *= n as f64;
        }
        let term = h.powi(n as i32 + 3) / ((n + 3) as f64 * fact);
        total += if n % 2 == 0 { term } else { -term };
        if term < 1e-300 || term < total.abs() * 1e-18 {
            break;
        }
        n += 1;
    }
    total
}

/// Expected squared error of clip-then-round-to-nearest on a unit Laplace
/// variable with clipping value `alpha`.
pub fn laplace_quantization_mse(alpha: f64, bits: u32) -> f64 {
    let levels = grid_limit(bits);
    let step = alpha / levels;
    let h = step / 2.0;
    // Inner bins k = 1..L−1 all contribute e^{−k·step}·J(h).
    let inner = if levels > 1.0 {
        let geometric = (-step).exp() * -(-(levels - 1.0) * step).exp_m1() / -(-step).exp_m1();
        centered_moment(h) * geometric
    } else {
        0.0
    };
    // Outermost bin plus the clipped tail, both mapped to `alpha`.
    let outer = (-alpha).exp() * h.exp() * (h * h - 2.0 * h + 2.0);
    half_moment(h) + inner + outer
}

/// Laplace-optimal clipping ratio `α*(bits)` for a unit Laplace, by a coarse
/// scan followed by golden-section refinement. Cached per bit width.
pub fn laplace_optimal_clip(bits: u32) -> f64 {
    static CACHE: OnceLock<Mutex<BTreeMap<u32, f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    if let Some(&v) = cache.lock().unwrap().get(&bits) {
        return v;
    }
    let f = |a: f64| laplace_quantization_mse(a, bits);
    let (lo, hi, n) = (0.05, 60.0, 1200);
    let grid: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
    let best = (0..grid.len())
        .min_by(|&a, &b| f(grid[a]).total_cmp(&f(grid[b])))
        .unwrap();
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(n)]);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-12 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let alpha = 0.5 * (a + b);
    cache.lock().unwrap().insert(bits, alpha);
    alpha
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Round toward +∞: error in `[0, scale)`.
    Positive,
    /// Round toward −∞: error in `(−scale, 0]`.
    Negative,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Positive => 1.0,
            Direction::Negative => -1.0,
        }
    }

    /// The direction whose errors oppose a quantity of sign `value`
    /// (ties go to `Negative`).
    pub fn opposing(value: f64) -> Direction {
        if value < 0.0 {
            Direction::Positive
        } else {
            Direction::Negative
        }
    }
}

/// Snaps `x` to the grid one-sidedly, clamping to `±limit · scale`.
pub fn round_directed(x: f64, scale: f64, limit: f64, dir: Direction) -> f64 {
    let mut k = match dir {
        Direction::Positive => (x / scale).ceil(),
        Direction::Negative => (x / scale).floor(),
    };
    // Correct for rounding in `x / scale` so the error sign is exact.
    match dir {
        Direction::Positive => {
            while k * scale < x {
                k += 1.0;
            }
            while (k - 1.0) * scale >= x {
                k -= 1.0;
            }
        }
        Direction::Negative => {
            while k * scale > x {
                k -= 1.0;
            }
            while (k + 1.0) * scale <= x {
                k += 1.0;
            }
        }
    }
    k.clamp(-limit, limit) * scale
}

/// One-sided rounding of a whole tensor. Returns the snapped tensor and the
/// error `q − t`.
pub fn directional_round(t: &Tensor, scale: f64, bits: u32, dir: Direction) -> Result<(Tensor, Tensor)> {
    check_scale(scale)?;
    let limit = grid_limit(bits);
    let q = t.map(|x| round_directed(x, scale, limit, dir));
    let eps = q.sub(t)?;
    Ok((q, eps))
}

/// Rounds each element against the sign of the matching gradient entry:
/// entries with positive gradient round down, negative round up, zero rounds
/// down. The first-order change `Σ g·(q − t)` is therefore never positive.
pub fn gradient_opposed_round(t: &Tensor, grad: &Tensor, scale: f64, bits: u32) -> Result<(Tensor, Tensor)> {
    check_scale(scale)?;
    if !t.same_shape(grad) {
        return Err(Error::Shape(format!(
            "gradient {:?} does not match tensor {:?}",
            grad.shape(),
            t.shape()
        )));
    }
    let limit = grid_limit(bits);
    let data = t
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| round_directed(x, scale, limit, Direction::opposing(g)))
        .collect();
    let q = Tensor::new(t.shape().to_vec(), data)?;
    let eps = q.sub(t)?;
    Ok((q, eps))
}

/// Unbiased stochastic rounding: rounds up with probability equal to the
/// fractional position between the two neighbouring grid points.
pub fn stochastic_round<R: Rng>(t: &Tensor, scale: f64, bits: u32, rng: &mut R) -> Result<(Tensor, Tensor)> {
    check_scale(scale)?;
    let limit = grid_limit(bits);
    let q = t.map(|x| {
        let lo = (x / scale).floor();
        let frac = x / scale - lo;
        let k = if rng.gen::<f64>() < frac { lo + 1.0 } else { lo };
        k.clamp(-limit, limit) * scale
    });
    let eps = q.sub(t)?;
    Ok((q, eps))
}

fn check_scale(scale: f64) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("quantization scale must be > 0, got {scale}")))
    }
}

/// Static per-tensor quantizer for a layer's input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationQuantizer {
    pub bits: u32,
    pub scale: f64,
    pub direction: Direction,
}

impl ActivationQuantizer {
    pub fn apply(&self, x: &mut [f64]) {
        let limit = grid_limit(self.bits);
        for v in x {
            *v = round_directed(*v, self.scale, limit, self.direction);
        }
    }
}

/// Direction for layer `k`'s input: opposite to the sign of `∂ℓ/∂h · 1`.
pub fn choose_direction(profile: &GradientProfile, layer: usize) -> Result<Direction> {
    let p = profile
        .layers
        .get(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("profile has no layer {layer}")))?;
    Ok(Direction::opposing(p.grad_dot_one))
}

/// How weight errors are signed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightRounding {
    /// Per element, against the sign of the calibrated weight gradient.
    #[default]
    GradientOpposed,
    /// The layer's activation direction for every element.
    LayerDirection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub scale_mode: ScaleMode,
    pub weight_rounding: WeightRounding,
    /// Weight-probe loss change below which the weight term is left out of
    /// the cost.
    pub error_max: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            scale_mode: ScaleMode::AbsMax,
            weight_rounding: WeightRounding::GradientOpposed,
            error_max: 1e-4,
        }
    }
}

/// Quantization decision for one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantPlan {
    pub layer: usize,
    pub level: QuantLevel,
    /// `0.0` when the level is full precision or the weights are all zero.
    pub scale_weight: f64,
    /// `0.0` when the level is full precision or the inputs are all zero.
    pub scale_input: f64,
    pub direction: Direction,
}

/// Diagnostics behind one `(layer, level)` cost entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub scale_input: f64,
    pub scale_weight: f64,
    pub eps_norm: f64,
    pub eps_size: usize,
    pub delta_norm: f64,
    pub delta_size: usize,
    pub slope: f64,
    pub fluc: f64,
    pub weight_term: bool,
}

/// Predicted loss impact `p[i][j]` and storage `w[i][j]` (bytes) for each
/// layer `i` and level `levels[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostMatrices {
    pub levels: Vec<QuantLevel>,
    pub p: Vec<Vec<f64>>,
    pub w: Vec<Vec<u64>>,
    pub probes: Vec<Vec<ProbeRecord>>,
}

fn dense_weight(model: &Model, k: usize) -> Result<&Tensor> {
    match &model.layer(k)?.weight {
        LayerWeight::Dense(w) => Ok(w),
        LayerWeight::Factored { .. } => Err(Error::InvalidArgument(format!(
            "layer {k} is factored; quantization needs dense weights"
        ))),
    }
}

/// Probe perturbation of magnitude `scale` on layer `k`'s weights, signed the
/// same way the real rounding would sign its errors.
fn weight_probe(w: &Tensor, grad: &Tensor, scale: f64, dir: Direction, mode: WeightRounding) -> Tensor {
    match mode {
        WeightRounding::GradientOpposed => grad.map(|g| scale * Direction::opposing(g).sign()),
        WeightRounding::LayerDirection => w.map(|_| scale * dir.sign()),
    }
}

fn round_weights(
    w: &Tensor,
    grad: &Tensor,
    scale: f64,
    bits: u32,
    dir: Direction,
    mode: WeightRounding,
) -> Result<(Tensor, Tensor)> {
    match mode {
        WeightRounding::GradientOpposed => gradient_opposed_round(w, grad, scale, bits),
        WeightRounding::LayerDirection => directional_round(w, scale, bits, dir),
    }
}

/// Builds the cost and storage matrices for every dense layer and level.
///
/// For layer `i` at level `j` the cost is
/// `slope · ‖ε‖/√|ε|`, plus `fluc/scale_w · ‖δ‖/√|δ|` when `fluc ≥ error_max`,
/// where `ε` is the activation rounding error over the calibration inputs,
/// `δ` the weight rounding error, `slope` the loss change per unit of a
/// constant `scale_input` shift of the layer input, and `fluc` the loss change
/// of a `scale_weight` probe on the weights. Full precision costs nothing.
pub fn build_cost_matrices(
    model: &Model,
    calib: &Dataset,
    profile: &GradientProfile,
    levels: &[QuantLevel],
    cfg: &QuantConfig,
) -> Result<CostMatrices> {
    if cfg.error_max <= 0.0 {
        return Err(Error::InvalidArgument("error_max must be > 0".into()));
    }
    if levels.is_empty() {
        return Err(Error::InvalidArgument("no quantization levels given".into()));
    }
    profile.check(model)?;
    let base_loss = loss_and_accuracy(model, calib)?.0;
    let pass = forward(model, calib.inputs())?;
    let n = model.num_layers();
    let mut p = vec![vec![0.0; levels.len()]; n];
    let mut w = vec![vec![0u64; levels.len()]; n];
    let mut probes = vec![Vec::with_capacity(levels.len()); n];
    for i in 0..n {
        let weight = dense_weight(model, i)?;
        let grad = &profile.layers[i].mean_weight_grad;
        let dir = choose_direction(profile, i)?;
        let inputs = &pass.activations[i];
        for (j, &level) in levels.iter().enumerate() {
            w[i][j] = level.bytes_for(weight.len());
            let Some(bits) = level.bit_width() else {
                probes[i].push(ProbeRecord {
                    scale_input: 0.0,
                    scale_weight: 0.0,
                    eps_norm: 0.0,
                    eps_size: inputs.len(),
                    delta_norm: 0.0,
                    delta_size: weight.len(),
                    slope: 0.0,
                    fluc: 0.0,
                    weight_term: false,
                });
                continue;
            };
            let scale_input = compute_scale(inputs.data(), bits, cfg.scale_mode)?;
            let scale_weight = compute_scale(weight.data(), bits, cfg.scale_mode)?;

            let (mut eps_norm, mut slope) = (0.0, 0.0);
            if scale_input > 0.0 {
                eps_norm = directional_round(inputs, scale_input, bits, dir)?.1.norm_l2();
                let mut shift = Perturbations::none(model);
                shift.activations[i] = Some(Tensor::from_fn(&[weight.cols()], |_| scale_input * dir.sign()));
                let probed = crate::net::loss_and_accuracy_perturbed(model, calib, Some(&shift))?.0;
                slope = (base_loss - probed).abs() / scale_input;
            }
            let mut cost = slope * eps_norm / (inputs.len() as f64).sqrt();

            let (mut delta_norm, mut fluc, mut weight_term) = (0.0, 0.0, false);
            if scale_weight > 0.0 {
                let mut probe = Perturbations::none(model);
                probe.weights[i] = Some(weight_probe(weight, grad, scale_weight, dir, cfg.weight_rounding));
                let probed = crate::net::loss_and_accuracy_perturbed(model, calib, Some(&probe))?.0;
                fluc = (base_loss - probed).abs();
                if fluc >= cfg.error_max {
                    let (_, delta) = round_weights(weight, grad, scale_weight, bits, dir, cfg.weight_rounding)?;
                    delta_norm = delta.norm_l2();
                    cost += fluc / scale_weight * delta_norm / (weight.len() as f64).sqrt();
                    weight_term = true;
                }
            }
            p[i][j] = cost;
            probes[i].push(ProbeRecord {
                scale_input,
                scale_weight,
                eps_norm,
                eps_size: inputs.len(),
                delta_norm,
                delta_size: weight.len(),
                slope,
                fluc,
                weight_term,
            });
        }
    }
    Ok(CostMatrices {
        levels: levels.to_vec(),
        p,
        w,
        probes,
    })
}

impl CostMatrices {
    /// Writes `P.csv` and `W.csv` style dumps: a header row of level labels,
    /// then one row per layer.
    pub fn write_csv(&self, p_path: &Path, w_path: &Path) -> Result<()> {
        let header = self.levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",");
        let mut p = format!("{header}\n");
        for row in &self.p {
            p.push_str(&row.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(","));
            p.push('\n');
        }
        let mut w = format!("{header}\n");
        for row in &self.w {
            w.push_str(&row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
            w.push('\n');
        }
        write_file(p_path, &p)?;
        write_file(w_path, &w)
    }

    /// Reads back the dumps written by [`CostMatrices::write_csv`].
    pub fn read_csv(p_path: &Path, w_path: &Path) -> Result<CostMatrices> {
        let (levels, p) = read_matrix(p_path, |s| s.parse::<f64>().ok())?;
        let (levels_w, w) = read_matrix(w_path, |s| s.parse::<u64>().ok())?;
        if levels != levels_w || p.len() != w.len() {
            return Err(Error::InvalidArgument("P and W dumps disagree in shape".into()));
        }
        Ok(CostMatrices {
            levels,
            p,
            w,
            probes: Vec::new(),
        })
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn read_matrix<T>(path: &Path, parse: impl Fn(&str) -> Option<T>) -> Result<(Vec<QuantLevel>, Vec<Vec<T>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let bad = |offset: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    let header = lines.next().ok_or_else(|| bad(0, "missing header".into()))?;
    let levels = header.split(',').map(str::parse).collect::<Result<Vec<QuantLevel>>>()?;
    let mut offset = header.len() + 1;
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            offset += line.len() + 1;
            continue;
        }
        let row = line
            .split(',')
            .map(|c| parse(c.trim()))
            .collect::<Option<Vec<T>>>()
            .ok_or_else(|| bad(offset, format!("bad number in row {line:?}")))?;
        if row.len() != levels.len() {
            return Err(bad(offset, format!("expected {} columns, got {}", levels.len(), row.len())));
        }
        rows.push(row);
        offset += line.len() + 1;
    }
    Ok((levels, rows))
}

/// Resolves scales and directions for the chosen level of every layer.
pub fn make_plans(
    model: &Model,
    calib: &Dataset,
    profile: &GradientProfile,
    choice: &[QuantLevel],
    cfg: &QuantConfig,
) -> Result<Vec<LayerQuantPlan>> {
    if choice.len() != model.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "{} levels for {} layers",
            choice.len(),
            model.num_layers()
        )));
    }
    profile.check(model)?;
    let pass = forward(model, calib.inputs())?;
    choice
        .iter()
        .enumerate()
        .map(|(k, &level)| {
            let direction = choose_direction(profile, k)?;
            let (scale_weight, scale_input) = match level.bit_width() {
                Some(bits) => (
                    compute_scale(dense_weight(model, k)?.data(), bits, cfg.scale_mode)?,
                    compute_scale(pass.activations[k].data(), bits, cfg.scale_mode)?,
                ),
                None => (0.0, 0.0),
            };
            Ok(LayerQuantPlan {
                layer: k,
                level,
                scale_weight,
                scale_input,
                direction,
            })
        })
        .collect()
}

/// Snaps weights and installs static input quantizers according to `plans`.
pub fn apply_plan(
    model: &Model,
    profile: &GradientProfile,
    plans: &[LayerQuantPlan],
    cfg: &QuantConfig,
) -> Result<Model> {
    let mut out = model.clone();
    for plan in plans {
        let Some(bits) = plan.level.bit_width() else {
            continue;
        };
        let grad = &profile.layers[plan.layer].mean_weight_grad;
        let layer = &mut out.layers_mut()[plan.layer];
        if plan.scale_weight > 0.0 {
            let LayerWeight::Dense(w) = &layer.weight else {
                return Err(Error::InvalidArgument(format!("layer {} is factored", plan.layer)));
            };
            let (q, _) = round_weights(w, grad, plan.scale_weight, bits, plan.direction, cfg.weight_rounding)?;
            layer.weight = LayerWeight::Dense(q);
        }
        layer.weight_bits = Some(bits);
        if plan.scale_input > 0.0 {
            layer.input_quant = Some(ActivationQuantizer {
                bits,
                scale: plan.scale_input,
                direction: plan.direction,
            });
        }
    }
    Ok(out)
}

/// Quantization noise of `plans` on the calibration set, as perturbations:
/// per layer, the mean (over samples) activation rounding error of the
/// original model's layer input, and the weight rounding error.
pub fn quantization_noise(
    model: &Model,
    calib: &Dataset,
    profile: &GradientProfile,
    plans: &[LayerQuantPlan],
    cfg: &QuantConfig,
) -> Result<Perturbations> {
    let pass = forward(model, calib.inputs())?;
    let mut noise = Perturbations::none(model);
    for plan in plans {
        let Some(bits) = plan.level.bit_width() else {
            continue;
        };
        let k = plan.layer;
        if plan.scale_input > 0.0 {
            let (_, eps) = directional_round(&pass.activations[k], plan.scale_input, bits, plan.direction)?;
            let (m, d) = (eps.rows(), eps.cols());
            let mut mean = vec![0.0; d];
            for r in 0..m {
                mean.iter_mut().zip(eps.row(r)).for_each(|(a, e)| *a += e);
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            noise.activations[k] = Some(Tensor::vector(mean)?);
        }
        if plan.scale_weight > 0.0 {
            let w = dense_weight(model, k)?;
            let grad = &profile.layers[k].mean_weight_grad;
            let (_, delta) = round_weights(w, grad, plan.scale_weight, bits, plan.direction, cfg.weight_rounding)?;
            noise.weights[k] = Some(delta);
        }
    }
    Ok(noise)
}
