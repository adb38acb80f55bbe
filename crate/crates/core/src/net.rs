//! Dense networks with a softmax cross-entropy head.
//!
//! Layers are stored in evaluation order: `layers()[0]` consumes the input
//! sample and the last layer produces the logits. The analysis literature this
//! toolkit follows numbers layers from the output side (`h_1` is outermost and
//! `h_{n+1}` is the sample); [`Model::outer_index`] converts between the two.
//!
//! Every per-sample quantity is reduced over a fixed partition of the samples
//! into [`REDUCTION_BLOCKS`] contiguous blocks. Blocks run in parallel, and the
//! block partials are added in block order, so results are bitwise identical
//! regardless of the number of worker threads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::ActivationQuantizer;
use crate::tensor::{dot, matvec, matvec_t_acc, outer_acc, Tensor};

/// Number of contiguous sample blocks used by every reduction.
pub const REDUCTION_BLOCKS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut [f64]) {
        if self == Activation::Relu {
            for v in z {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Weight storage of one layer: a plain `out × in` matrix, or a rank-`r`
/// factorisation `left · right` with `left: out × r` and `right: r × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerWeight {
    Dense(Tensor),
    Factored { left: Tensor, right: Tensor },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: LayerWeight,
    pub bias: Tensor,
    pub activation: Activation,
    /// Bit width the dense weights were snapped to, `None` at full precision.
    pub weight_bits: Option<u32>,
    /// Static quantizer applied to this layer's input during inference.
    pub input_quant: Option<ActivationQuantizer>,
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if !weight.is_matrix() {
            return Err(Error::Shape(format!(
                "layer weight must be 2-D, got {:?}",
                weight.shape()
            )));
        }
        if bias.shape() != [weight.rows()] {
            return Err(Error::Shape(format!(
                "bias {:?} does not match {} output rows",
                bias.shape(),
                weight.rows()
            )));
        }
        Ok(Self {
            weight: LayerWeight::Dense(weight),
            bias,
            activation,
            weight_bits: None,
            input_quant: None,
        })
    }

    pub fn factored(left: Tensor, right: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if !left.is_matrix() || !right.is_matrix() || left.cols() != right.rows() {
            return Err(Error::Shape(format!(
                "factor shapes {:?} and {:?} do not chain",
                left.shape(),
                right.shape()
            )));
        }
        if bias.shape() != [left.rows()] {
            return Err(Error::Shape(format!(
                "bias {:?} does not match {} output rows",
                bias.shape(),
                left.rows()
            )));
        }
        Ok(Self {
            weight: LayerWeight::Factored { left, right },
            bias,
            activation,
            weight_bits: None,
            input_quant: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        match &self.weight {
            LayerWeight::Dense(w) => w.cols(),
            LayerWeight::Factored { right, .. } => right.cols(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match &self.weight {
            LayerWeight::Dense(w) => w.rows(),
            LayerWeight::Factored { left, .. } => left.rows(),
        }
    }

    pub fn is_factored(&self) -> bool {
        matches!(self.weight, LayerWeight::Factored { .. })
    }

    pub fn rank(&self) -> Option<usize> {
        match &self.weight {
            LayerWeight::Dense(_) => None,
            LayerWeight::Factored { left, .. } => Some(left.cols()),
        }
    }

    pub fn dense_weight(&self) -> Option<&Tensor> {
        match &self.weight {
            LayerWeight::Dense(w) => Some(w),
            LayerWeight::Factored { .. } => None,
        }
    }

    /// The `out × in` matrix the layer applies (`left · right` when factored).
    pub fn effective_weight(&self) -> Tensor {
        match &self.weight {
            LayerWeight::Dense(w) => w.clone(),
            LayerWeight::Factored { left, right } => left.matmul(right).expect("factor shapes chain"),
        }
    }

    /// Number of stored weight values (excluding the bias).
    pub fn weight_count(&self) -> usize {
        match &self.weight {
            LayerWeight::Dense(w) => w.len(),
            LayerWeight::Factored { left, right } => left.len() + right.len(),
        }
    }

    /// Serialized weight size: `⌈count · bits / 8⌉` bytes when quantized,
    /// eight bytes per value otherwise.
    pub fn weight_bytes(&self) -> u64 {
        let n = self.weight_count() as u64;
        match self.weight_bits {
            Some(bits) => (n * bits as u64).div_ceil(8),
            None => 8 * n,
        }
    }

    pub fn bias_bytes(&self) -> u64 {
        8 * self.bias.len() as u64
    }
}

/// Ordered stack of dense layers ending in logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    layers: Vec<DenseLayer>,
}

impl Model {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        for k in 1..layers.len() {
            if layers[k].in_dim() != layers[k - 1].out_dim() {
                return Err(Error::DimensionMismatch {
                    layer: k,
                    expected: layers[k - 1].out_dim(),
                    got: layers[k].in_dim(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// He-initialised MLP with ReLU hidden layers and an identity output layer.
    /// `dims = [input, hidden.., classes]`.
    pub fn mlp(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for k in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            let w = Tensor::from_fn(&[fan_out, fan_in], |_| normal.sample(&mut rng));
            let act = if k + 2 == dims.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(DenseLayer::new(w, Tensor::zeros(&[fan_out]), act)?);
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn layer(&self, k: usize) -> Result<&DenseLayer> {
        self.layers
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {k} out of range ({} layers)", self.layers.len())))
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Output-side index of the layer at evaluation position `k`
    /// (the last layer is 1, the first is `n`).
    pub fn outer_index(&self, k: usize) -> usize {
        self.layers.len() - k
    }

    /// Serialized parameter bytes at each layer's current precision.
    pub fn stored_bytes(&self) -> u64 {
        self.layers.iter().map(|l| l.weight_bytes() + l.bias_bytes()).sum()
    }

    /// Replaces the weight of dense layer `k` by a random rank-`rank` product,
    /// scaled like the He initialisation. Used to build numerically
    /// rank-deficient fixtures.
    pub fn with_low_rank_layer(mut self, k: usize, rank: usize, seed: u64) -> Result<Self> {
        let layer = self.layer(k)?;
        let (out, inp) = (layer.out_dim(), layer.in_dim());
        if rank == 0 || rank > out.min(inp) {
            return Err(Error::InvalidArgument(format!("rank {rank} invalid for {out}x{inp}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (2.0 / (inp as f64 * rank as f64)).sqrt().sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let a = Tensor::from_fn(&[out, rank], |_| normal.sample(&mut rng));
        let b = Tensor::from_fn(&[rank, inp], |_| normal.sample(&mut rng));
        self.layers[k].weight = LayerWeight::Dense(a.matmul(&b)?);
        Ok(self)
    }
}

/// Labelled samples, one row of `inputs` per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !inputs.is_matrix() {
            return Err(Error::Shape("dataset inputs must be [samples x features]".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    /// Checks that the dataset can be fed to `model`.
    pub fn check_compatible(&self, model: &Model) -> Result<()> {
        if self.dim() != model.input_dim() {
            return Err(Error::DimensionMismatch {
                layer: 0,
                expected: model.input_dim(),
                got: self.dim(),
            });
        }
        let classes = model.num_classes();
        if let Some((sample, &label)) = self.labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange { sample, label, classes });
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Dataset {
            inputs: Tensor::new(vec![indices.len(), d], data).expect("subset of a valid dataset"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Seeded shuffle then split: the first part holds `round(frac · m)` samples.
    pub fn split(&self, frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(frac > 0.0 && frac < 1.0) {
            return Err(Error::InvalidArgument(format!("split fraction {frac} not in (0, 1)")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let k = ((frac * self.len() as f64).round() as usize).clamp(1, self.len().saturating_sub(1).max(1));
        if k >= self.len() {
            return Err(Error::InvalidArgument("dataset too small to split".into()));
        }
        Ok((self.subset(&idx[..k]), self.subset(&idx[k..])))
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim() != other.dim() {
            return Err(Error::Shape("concat: feature widths differ".into()));
        }
        let mut data = self.inputs.data().to_vec();
        data.extend_from_slice(other.inputs.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(Tensor::matrix(labels.len(), self.dim(), data)?, labels)
    }
}

/// Additive perturbations applied during evaluation: `activations[k]` is added
/// to every sample's input of layer `k` (broadcast over samples), and
/// `weights[k]` is added to the effective weight of layer `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbations {
    pub activations: Vec<Option<Tensor>>,
    pub weights: Vec<Option<Tensor>>,
}

impl Perturbations {
    pub fn none(model: &Model) -> Self {
        let n = model.num_layers();
        Self {
            activations: vec![None; n],
            weights: vec![None; n],
        }
    }

    pub fn check(&self, model: &Model) -> Result<()> {
        let n = model.num_layers();
        if self.activations.len() != n || self.weights.len() != n {
            return Err(Error::Shape(format!("perturbation set does not cover {n} layers")));
        }
        for (k, layer) in model.layers().iter().enumerate() {
            if let Some(a) = &self.activations[k] {
                if a.shape() != [layer.in_dim()] {
                    return Err(Error::Shape(format!(
                        "activation perturbation for layer {k} has shape {:?}, expected [{}]",
                        a.shape(),
                        layer.in_dim()
                    )));
                }
            }
            if let Some(w) = &self.weights[k] {
                if w.shape() != [layer.out_dim(), layer.in_dim()] {
                    return Err(Error::Shape(format!(
                        "weight perturbation for layer {k} has shape {:?}, expected [{}, {}]",
                        w.shape(),
                        layer.out_dim(),
                        layer.in_dim()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.activations
            .iter()
            .chain(&self.weights)
            .flatten()
            .all(|t| t.data().iter().all(|&v| v == 0.0))
    }

    /// Inner product over all present entries (missing entries count as zero).
    pub fn dot(&self, other: &Perturbations) -> f64 {
        fn pair(a: &[Option<Tensor>], b: &[Option<Tensor>]) -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| match (x, y) {
                    (Some(x), Some(y)) => dot(x.data(), y.data()),
                    _ => 0.0,
                })
                .sum()
        }
        pair(&self.activations, &other.activations) + pair(&self.weights, &other.weights)
    }

    /// `self + c · other`, treating missing entries as zero.
    pub fn axpy(&self, c: f64, other: &Perturbations) -> Perturbations {
        fn comb(a: &[Option<Tensor>], b: &[Option<Tensor>], c: f64) -> Vec<Option<Tensor>> {
            a.iter()
                .zip(b)
                .map(|(x, y)| match (x, y) {
                    (Some(x), Some(y)) => Some(x.add(&y.scale(c)).expect("matching shapes")),
                    (Some(x), None) => Some(x.clone()),
                    (None, Some(y)) => Some(y.scale(c)),
                    (None, None) => None,
                })
                .collect()
        }
        Perturbations {
            activations: comb(&self.activations, &other.activations, c),
            weights: comb(&self.weights, &other.weights, c),
        }
    }

    pub fn scale(&self, c: f64) -> Perturbations {
        let s = |v: &Vec<Option<Tensor>>| v.iter().map(|t| t.as_ref().map(|t| t.scale(c))).collect();
        Perturbations {
            activations: s(&self.activations),
            weights: s(&self.weights),
        }
    }
}

/// Result of evaluating a batch.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `[m × classes]` (or `[classes]` for a single-sample input).
    pub logits: Tensor,
    /// Input seen by each layer, after any input quantizer and shift,
    /// `[m × in_k]` per layer.
    pub activations: Vec<Tensor>,
}

/// Layer weights resolved once per evaluation, with weight perturbations folded in.
enum Prepared<'a> {
    Dense(std::borrow::Cow<'a, [f64]>),
    Factored { left: &'a Tensor, right: &'a Tensor },
}

struct Prep<'a> {
    weights: Vec<Prepared<'a>>,
    shifts: Vec<Option<&'a [f64]>>,
    /// When set, ReLU gates are taken from this (unperturbed) evaluation.
    gates: Option<Box<Prep<'a>>>,
}

fn prepare<'a>(model: &'a Model, pert: Option<&'a Perturbations>) -> Result<Prep<'a>> {
    if let Some(p) = pert {
        p.check(model)?;
    }
    let mut weights = Vec::with_capacity(model.num_layers());
    let mut shifts = Vec::with_capacity(model.num_layers());
    for (k, layer) in model.layers().iter().enumerate() {
        let delta = pert.and_then(|p| p.weights[k].as_ref());
        let prepared = match (&layer.weight, delta) {
            (LayerWeight::Dense(w), None) => Prepared::Dense(std::borrow::Cow::Borrowed(w.data())),
            (LayerWeight::Dense(w), Some(d)) => {
                Prepared::Dense(std::borrow::Cow::Owned(w.add(d)?.into_data()))
            }
            (LayerWeight::Factored { left, right }, None) => Prepared::Factored { left, right },
            (LayerWeight::Factored { .. }, Some(d)) => {
                let w = layer.effective_weight().add(d)?;
                Prepared::Dense(std::borrow::Cow::Owned(w.into_data()))
            }
        };
        weights.push(prepared);
        shifts.push(pert.and_then(|p| p.activations[k].as_ref()).map(|t| t.data()));
    }
    Ok(Prep {
        weights,
        shifts,
        gates: None,
    })
}

/// Like [`prepare`], but every ReLU keeps the on/off pattern it has in the
/// unperturbed model, so the perturbed evaluation stays on the smooth piece
/// of the loss that contains the unperturbed point.
fn prepare_gated<'a>(model: &'a Model, pert: Option<&'a Perturbations>) -> Result<Prep<'a>> {
    let mut prep = prepare(model, pert)?;
    prep.gates = Some(Box::new(prepare(model, None)?));
    Ok(prep)
}

impl Prep<'_> {
    /// `z = W x + b` for layer `k`.
    fn affine(&self, model: &Model, k: usize, x: &[f64], z: &mut [f64]) {
        let layer = &model.layers()[k];
        match &self.weights[k] {
            Prepared::Dense(w) => matvec(w, x, z),
            Prepared::Factored { left, right } => {
                let mut mid = vec![0.0; right.rows()];
                matvec(right.data(), x, &mut mid);
                matvec(left.data(), &mid, z);
            }
        }
        for (zi, bi) in z.iter_mut().zip(layer.bias.data()) {
            *zi += bi;
        }
    }

    /// `out += Wᵀ dz` for layer `k`.
    fn affine_t(&self, k: usize, dz: &[f64], out: &mut [f64]) {
        match &self.weights[k] {
            Prepared::Dense(w) => matvec_t_acc(w, dz, out),
            Prepared::Factored { left, right } => {
                let mut mid = vec![0.0; left.cols()];
                matvec_t_acc(left.data(), dz, &mut mid);
                matvec_t_acc(right.data(), &mid, out);
            }
        }
    }

    /// Layer input after the static quantizer and the additive shift.
    fn layer_input(&self, model: &Model, k: usize, x: &mut [f64]) {
        if let Some(q) = &model.layers()[k].input_quant {
            q.apply(x);
        }
        if let Some(s) = self.shifts[k] {
            for (xi, si) in x.iter_mut().zip(s) {
                *xi += si;
            }
        }
    }

    /// Runs one sample, returning the layer inputs, the pre-activations and,
    /// for a gated evaluation, the pre-activations that decide the ReLU gates.
    fn run(&self, model: &Model, sample: &[f64]) -> Evaluated {
        let n = model.num_layers();
        let gate_pre = self.gates.as_ref().map(|g| g.run(model, sample).pre);
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut x = sample.to_vec();
        for k in 0..n {
            self.layer_input(model, k, &mut x);
            let layer = &model.layers()[k];
            let mut z = vec![0.0; layer.out_dim()];
            self.affine(model, k, &x, &mut z);
            let mut a = z.clone();
            match (&gate_pre, layer.activation) {
                (Some(g), Activation::Relu) => a.iter_mut().zip(&g[k]).for_each(|(v, &gz)| {
                    if gz <= 0.0 {
                        *v = 0.0;
                    }
                }),
                _ => layer.activation.apply(&mut a),
            }
            inputs.push(std::mem::replace(&mut x, a));
            pre.push(z);
        }
        // `x` now holds the logits, identical to the last pre-activation for an
        // identity head; keep the post-activation value as the logits.
        let last = pre.len() - 1;
        pre[last] = x;
        Evaluated { inputs, pre, gate_pre }
    }
}

struct Evaluated {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    gate_pre: Option<Vec<Vec<f64>>>,
}

fn check_input(model: &Model, input: &Tensor) -> Result<(usize, bool)> {
    let single = input.shape().len() == 1;
    if !single && !input.is_matrix() {
        return Err(Error::Shape(format!("input must be 1-D or 2-D, got {:?}", input.shape())));
    }
    if input.cols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            expected: model.input_dim(),
            got: input.cols(),
        });
    }
    Ok((input.rows(), single))
}

/// Evaluates the model on one sample (`[d]`) or a batch (`[m × d]`).
pub fn forward(model: &Model, input: &Tensor) -> Result<ForwardPass> {
    forward_perturbed(model, input, None)
}

/// [`forward`] with additive activation and weight perturbations.
pub fn forward_perturbed(model: &Model, input: &Tensor, pert: Option<&Perturbations>) -> Result<ForwardPass> {
    let (m, single) = check_input(model, input)?;
    let prep = prepare(model, pert)?;
    let d = input.cols();
    let rows: Vec<(Vec<Vec<f64>>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut e = prep.run(model, &input.data()[i * d..(i + 1) * d]);
            (e.inputs, e.pre.pop().unwrap())
        })
        .collect();
    let classes = model.num_classes();
    let mut logits = Vec::with_capacity(m * classes);
    let mut acts: Vec<Vec<f64>> = model.layers().iter().map(|l| Vec::with_capacity(m * l.in_dim())).collect();
    for (inputs, out) in rows {
        logits.extend_from_slice(&out);
        for (acc, x) in acts.iter_mut().zip(inputs) {
            acc.extend_from_slice(&x);
        }
    }
    let logits = if single {
        Tensor::vector(logits)?
    } else {
        Tensor::matrix(m, classes, logits)?
    };
    let activations = acts
        .into_iter()
        .zip(model.layers())
        .map(|(a, l)| Tensor::matrix(m, l.in_dim(), a))
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardPass { logits, activations })
}

/// Numerically stable `log Σ exp(z) − z[label]` together with the softmax.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - logits[label];
    (loss.max(0.0), exps.into_iter().map(|e| e / total).collect())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn block_ranges(m: usize) -> Vec<std::ops::Range<usize>> {
    let blocks = REDUCTION_BLOCKS.min(m).max(1);
    (0..blocks).map(|b| (b * m / blocks)..((b + 1) * m / blocks)).collect()
}

/// Mean cross-entropy loss and top-1 accuracy over `data`.
pub fn loss_and_accuracy(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    loss_and_accuracy_perturbed(model, data, None)
}

pub fn loss_and_accuracy_perturbed(
    model: &Model,
    data: &Dataset,
    pert: Option<&Perturbations>,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.check_compatible(model)?;
    let prep = prepare(model, pert)?;
    let partials: Vec<(f64, usize)> = block_ranges(data.len())
        .into_par_iter()
        .map(|range| {
            let mut loss = 0.0;
            let mut hits = 0;
            for i in range {
                let pre = prep.run(model, data.sample(i)).pre;
                let logits = pre.last().unwrap();
                loss += cross_entropy(logits, data.labels()[i]).0;
                hits += usize::from(argmax(logits) == data.labels()[i]);
            }
            (loss, hits)
        })
        .collect();
    let (loss, hits) = partials.into_iter().fold((0.0, 0), |(l, h), (pl, ph)| (l + pl, h + ph));
    let m = data.len() as f64;
    let mean = loss / m;
    if !mean.is_finite() {
        return Err(Error::NonFinite("mean loss".into()));
    }
    Ok((mean, hits as f64 / m))
}

/// Per-sample losses, in sample order.
pub fn per_sample_losses(model: &Model, data: &Dataset, pert: Option<&Perturbations>) -> Result<Vec<f64>> {
    data.check_compatible(model)?;
    let prep = prepare(model, pert)?;
    Ok((0..data.len())
        .into_par_iter()
        .map(|i| {
            let pre = prep.run(model, data.sample(i)).pre;
            cross_entropy(pre.last().unwrap(), data.labels()[i]).0
        })
        .collect())
}

/// Gradients of the (mean) loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    /// `∂ℓ/∂W_k` with respect to the effective `out × in` weight of each layer.
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    /// `∂ℓ/∂h` with respect to each layer's input, `[in_k]`.
    pub activations: Vec<Tensor>,
    pub loss: f64,
}

struct Accum {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    activations: Vec<Vec<f64>>,
    loss: f64,
}

impl Accum {
    fn new(model: &Model) -> Self {
        Self {
            weights: model.layers().iter().map(|l| vec![0.0; l.out_dim() * l.in_dim()]).collect(),
            biases: model.layers().iter().map(|l| vec![0.0; l.out_dim()]).collect(),
            activations: model.layers().iter().map(|l| vec![0.0; l.in_dim()]).collect(),
            loss: 0.0,
        }
    }

    fn merge(&mut self, other: Accum) {
        for (a, b) in self.weights.iter_mut().zip(other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.biases.iter_mut().zip(other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.activations.iter_mut().zip(other.activations) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.loss += other.loss;
    }
}

/// Per-layer backward signals for one sample.
struct SampleGrad {
    inputs: Vec<Vec<f64>>,
    /// `∂ℓ/∂z_k` for each layer's pre-activation.
    dz: Vec<Vec<f64>>,
    /// `∂ℓ/∂h` for each layer's input.
    dh: Vec<Vec<f64>>,
    loss: f64,
}

fn sample_backward(prep: &Prep, model: &Model, sample: &[f64], label: usize) -> SampleGrad {
    let n = model.num_layers();
    let Evaluated { inputs, pre, gate_pre } = prep.run(model, sample);
    let (loss, mut delta) = cross_entropy(&pre[n - 1], label);
    let gates = gate_pre.as_ref().unwrap_or(&pre);
    delta[label] -= 1.0;
    let mut dz = vec![Vec::new(); n];
    let mut dh = vec![Vec::new(); n];
    for k in (0..n).rev() {
        let layer = &model.layers()[k];
        if layer.activation == Activation::Relu {
            for (d, z) in delta.iter_mut().zip(&gates[k]) {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let mut g = vec![0.0; layer.in_dim()];
        prep.affine_t(k, &delta, &mut g);
        dz[k] = std::mem::take(&mut delta);
        // Straight-through across the input quantizer and shift.
        delta = g.clone();
        dh[k] = g;
    }
    SampleGrad { inputs, dz, dh, loss }
}

fn accumulate(model: &Model, prep: &Prep, data: &Dataset, range: std::ops::Range<usize>) -> Accum {
    let mut acc = Accum::new(model);
    for i in range {
        let s = sample_backward(prep, model, data.sample(i), data.labels()[i]);
        for k in 0..model.num_layers() {
            outer_acc(&mut acc.weights[k], &s.dz[k], &s.inputs[k]);
            acc.biases[k].iter_mut().zip(&s.dz[k]).for_each(|(a, d)| *a += d);
            acc.activations[k].iter_mut().zip(&s.dh[k]).for_each(|(a, d)| *a += d);
        }
        acc.loss += s.loss;
    }
    acc
}

/// Gradients for a single sample.
pub fn backward(model: &Model, input: &Tensor, label: usize) -> Result<Gradients> {
    let (m, _) = check_input(model, input)?;
    if m != 1 {
        return Err(Error::Shape("backward takes a single sample; use batch_gradients".into()));
    }
    let data = Dataset::new(input.clone().reshape(vec![1, input.cols()])?, vec![label])?;
    batch_gradients(model, &data, None)
}

/// Gradients of the mean loss over `data`, optionally at a perturbed point.
pub fn batch_gradients(model: &Model, data: &Dataset, pert: Option<&Perturbations>) -> Result<Gradients> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.check_compatible(model)?;
    gradients_with(model, data, prepare(model, pert)?)
}

/// Gradients at a perturbed point with every ReLU gate held at its
/// unperturbed state: the gradient of the smooth piece of the loss that the
/// unperturbed model sits on. Differences of these give Hessian products that
/// ignore gate flips, which carry no curvature of the piece itself.
pub fn batch_gradients_gated(model: &Model, data: &Dataset, pert: &Perturbations) -> Result<Gradients> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.check_compatible(model)?;
    gradients_with(model, data, prepare_gated(model, Some(pert))?)
}

fn gradients_with(model: &Model, data: &Dataset, prep: Prep) -> Result<Gradients> {
    let partials: Vec<Accum> = block_ranges(data.len())
        .into_par_iter()
        .map(|r| accumulate(model, &prep, data, r))
        .collect();
    let mut it = partials.into_iter();
    let mut total = it.next().unwrap();
    for p in it {
        total.merge(p);
    }
    let inv = 1.0 / data.len() as f64;
    let finish = |v: Vec<f64>, shape: &[usize], what: &str| -> Result<Tensor> {
        let t = Tensor::new(shape.to_vec(), v.into_iter().map(|x| x * inv).collect());
        t.map_err(|_| Error::NonFinite(what.to_string()))
    };
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut activations = Vec::new();
    for (k, layer) in model.layers().iter().enumerate() {
        let (o, i) = (layer.out_dim(), layer.in_dim());
        weights.push(finish(std::mem::take(&mut total.weights[k]), &[o, i], "weight gradient")?);
        biases.push(finish(std::mem::take(&mut total.biases[k]), &[o], "bias gradient")?);
        activations.push(finish(std::mem::take(&mut total.activations[k]), &[i], "activation gradient")?);
    }
    Ok(Gradients {
        weights,
        biases,
        activations,
        loss: total.loss * inv,
    })
}

/// Per-sample directional derivative `∇ℓ_s · v` at an optional perturbed point,
/// where `v` perturbs activations (broadcast) and effective weights. At a
/// perturbed point the ReLU gates are held as in [`batch_gradients_gated`].
pub fn per_sample_directional(
    model: &Model,
    data: &Dataset,
    at: Option<&Perturbations>,
    direction: &Perturbations,
) -> Result<Vec<f64>> {
    data.check_compatible(model)?;
    direction.check(model)?;
    let prep = match at {
        Some(_) => prepare_gated(model, at)?,
        None => prepare(model, None)?,
    };
    Ok((0..data.len())
        .into_par_iter()
        .map(|i| {
            let s = sample_backward(&prep, model, data.sample(i), data.labels()[i]);
            let mut total = 0.0;
            for k in 0..model.num_layers() {
                if let Some(e) = &direction.activations[k] {
                    total += dot(&s.dh[k], e.data());
                }
                if let Some(v) = &direction.weights[k] {
                    // dzᵀ V x
                    let mut vx = vec![0.0; s.dz[k].len()];
                    matvec(v.data(), &s.inputs[k], &mut vx);
                    total += dot(&s.dz[k], &vx);
                }
            }
            total
        })
        .collect())
}

/// SGD settings for [`train_fixture`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Minibatch SGD on dense layers; deterministic for a given seed.
pub fn train_fixture(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.check_compatible(model)?;
    if model.layers().iter().any(|l| l.is_factored()) {
        return Err(Error::InvalidArgument("training factored layers is not supported".into()));
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mini = data.subset(chunk);
            let g = batch_gradients(&model, &mini, None)?;
            for (k, layer) in model.layers_mut().iter_mut().enumerate() {
                if let LayerWeight::Dense(w) = &mut layer.weight {
                    w.data_mut()
                        .iter_mut()
                        .zip(g.weights[k].data())
                        .for_each(|(w, g)| *w -= cfg.lr * g);
                }
                layer
                    .bias
                    .data_mut()
                    .iter_mut()
                    .zip(g.biases[k].data())
                    .for_each(|(b, g)| *b -= cfg.lr * g);
            }
        }
    }
    Ok(model)
}
