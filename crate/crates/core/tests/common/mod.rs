//! Oracles and builders shared by the integration tests. Nothing here calls
//! into the code under test for the quantity being checked.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use llc::net::{loss_and_accuracy, loss_and_accuracy_perturbed, Activation, DenseLayer, LayerWeight, Perturbations};
use llc::{Dataset, Model, Tensor};

/// Eigenvalues of a symmetric matrix (row-major, `n × n`) by cyclic Jacobi
/// rotations, sorted in decreasing order.
pub fn jacobi_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut a = a.to_vec();
    let at = |i: usize, j: usize| i * n + j;
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[at(i, j)] * a[at(i, j)])
            .sum();
        let diag: f64 = (0..n).map(|i| a[at(i, i)] * a[at(i, i)]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[at(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[at(q, q)] - a[at(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[at(k, p)], a[at(k, q)]);
                    a[at(k, p)] = c * akp - s * akq;
                    a[at(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[at(p, k)], a[at(q, k)]);
                    a[at(p, k)] = c * apk - s * aqk;
                    a[at(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[at(i, i)]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Gram matrix on the smaller side of a row-major `rows × cols` matrix.
pub fn small_gram(w: &[f64], rows: usize, cols: usize) -> (Vec<f64>, usize) {
    if rows <= cols {
        let mut g = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                g[i * rows + j] = (0..cols).map(|k| w[i * cols + k] * w[j * cols + k]).sum();
            }
        }
        (g, rows)
    } else {
        let mut g = vec![0.0; cols * cols];
        for i in 0..cols {
            for j in 0..cols {
                g[i * cols + j] = (0..rows).map(|k| w[k * cols + i] * w[k * cols + j]).sum();
            }
        }
        (g, cols)
    }
}

/// `Σ_{i≥r} σ_i²` from the Jacobi eigenvalues of the smaller Gram matrix.
pub fn trailing_energy(w: &Tensor, r: usize) -> f64 {
    let (g, n) = small_gram(w.data(), w.rows(), w.cols());
    jacobi_eigenvalues(&g, n)[r.min(n)..].iter().sum()
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Dense net with the given widths and a random activation per layer.
pub fn random_net(rng: &mut ChaCha8Rng, dims: &[usize]) -> Model {
    let layers = dims
        .windows(2)
        .map(|d| {
            let act = if rng.gen::<bool>() { Activation::Relu } else { Activation::Identity };
            let w = gaussian(rng, &[d[1], d[0]], 1.0 / (d[0] as f64).sqrt());
            let b = gaussian(rng, &[d[1]], 0.3);
            DenseLayer::new(w, b, act).unwrap()
        })
        .collect();
    Model::new(layers).unwrap()
}

pub fn random_data(rng: &mut ChaCha8Rng, m: usize, dim: usize, classes: usize) -> Dataset {
    let x = gaussian(rng, &[m, dim], 1.0);
    let labels = (0..m).map(|_| rng.gen_range(0..classes)).collect();
    Dataset::new(x, labels).unwrap()
}

pub fn mean_loss(model: &Model, data: &Dataset) -> f64 {
    loss_and_accuracy(model, data).unwrap().0
}

pub fn perturbed_loss(model: &Model, data: &Dataset, p: &Perturbations) -> f64 {
    loss_and_accuracy_perturbed(model, data, Some(p)).unwrap().0
}

/// Central differences of the mean loss with respect to every weight, bias
/// and (broadcast) layer-input entry.
pub struct FdGradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub activations: Vec<Vec<f64>>,
}

pub fn fd_gradients(model: &Model, data: &Dataset, h: f64) -> FdGradients {
    let n = model.num_layers();
    let mut out = FdGradients {
        weights: vec![],
        biases: vec![],
        activations: vec![],
    };
    for k in 0..n {
        let (rows, cols) = (model.layers()[k].out_dim(), model.layers()[k].in_dim());
        let mut gw = vec![0.0; rows * cols];
        for (i, g) in gw.iter_mut().enumerate() {
            let bump = |s: f64| {
                let mut m = model.clone();
                if let LayerWeight::Dense(w) = &mut m.layers_mut()[k].weight {
                    w.data_mut()[i] += s;
                }
                mean_loss(&m, data)
            };
            *g = (bump(h) - bump(-h)) / (2.0 * h);
        }
        let mut gb = vec![0.0; rows];
        for (i, g) in gb.iter_mut().enumerate() {
            let bump = |s: f64| {
                let mut m = model.clone();
                m.layers_mut()[k].bias.data_mut()[i] += s;
                mean_loss(&m, data)
            };
            *g = (bump(h) - bump(-h)) / (2.0 * h);
        }
        let mut ga = vec![0.0; cols];
        for (i, g) in ga.iter_mut().enumerate() {
            let bump = |s: f64| {
                let mut p = Perturbations::none(model);
                let mut v = vec![0.0; cols];
                v[i] = s;
                p.activations[k] = Some(Tensor::vector(v).unwrap());
                perturbed_loss(model, data, &p)
            };
            *g = (bump(h) - bump(-h)) / (2.0 * h);
        }
        out.weights.push(gw);
        out.biases.push(gb);
        out.activations.push(ga);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nb).max(floor)
}

/// Gaussian direction over every weight and layer input, scaled to `norm`.
pub fn random_direction(rng: &mut ChaCha8Rng, model: &Model, norm: f64) -> Perturbations {
    let mut p = Perturbations::none(model);
    for (k, l) in model.layers().iter().enumerate() {
        p.activations[k] = Some(gaussian(rng, &[l.in_dim()], 1.0));
        p.weights[k] = Some(gaussian(rng, &[l.out_dim(), l.in_dim()], 1.0));
    }
    let len = p.dot(&p).sqrt();
    p.scale(norm / len)
}
