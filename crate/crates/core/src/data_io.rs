//! Dataset loaders, synthetic generators, the model container and reports.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "LLCM" | version: u32 | manifest_len: u64 | manifest (JSON) | blobs...
//! ```
//!
//! Blobs follow in manifest order, each a flat row-major array of `f64` or
//! `f32` values.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Activation, Dataset, DenseLayer, LayerWeight, Model};
use crate::quant::ActivationQuantizer;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MODEL_MAGIC: &[u8; 4] = b"LLCM";
pub const MODEL_VERSION: u32 = 1;

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::io(path, e)
}

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| parse_err(path, offset, format!("file ends before {what}")))
}

/// Parses an IDX image file into `[count × rows·cols]` values in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let magic = read_be_u32(bytes, 0, path, "magic number")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(path, 0, format!("bad image magic {magic:#010x}")));
    }
    let count = read_be_u32(bytes, 4, path, "image count")? as usize;
    let rows = read_be_u32(bytes, 8, path, "row count")? as usize;
    let cols = read_be_u32(bytes, 12, path, "column count")? as usize;
    let dim = rows * cols;
    let need = 16 + count * dim;
    if bytes.len() < need {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated pixel data: expected {need} bytes"),
        ));
    }
    if bytes.len() > need {
        return Err(parse_err(path, need, "trailing bytes after pixel data"));
    }
    if count == 0 || dim == 0 {
        return Err(Error::EmptyDataset);
    }
    let data = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![count, dim], data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0, path, "magic number")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(path, 0, format!("bad label magic {magic:#010x}")));
    }
    let count = read_be_u32(bytes, 4, path, "label count")? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(parse_err(path, bytes.len(), format!("truncated labels: expected {need} bytes")));
    }
    if bytes.len() > need {
        return Err(parse_err(path, need, "trailing bytes after labels"));
    }
    Ok(bytes[8..need].iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io(path, e))
}

/// Loads a matching pair of IDX image and label files.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = parse_idx_images(&read(images)?, images)?;
    let y = parse_idx_labels(&read(labels)?, labels)?;
    if x.rows() != y.len() {
        return Err(parse_err(
            labels,
            4,
            format!("{} labels for {} images", y.len(), x.rows()),
        ));
    }
    Dataset::new(x, y)
}

/// Loads the standard MNIST file names from `dir`; `train` picks the
/// 60k split, otherwise the 10k test split.
pub fn load_mnist_dir(dir: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Reads `label,x1,x2,...` rows. Lines starting with `#` are skipped.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut dim = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let offset = e.position().map(|p| p.byte() as usize).unwrap_or(0);
            parse_err(path, offset, e.to_string())
        })?;
        let offset = rec.position().map(|p| p.byte() as usize).unwrap_or(0);
        if rec.len() < 2 {
            return Err(parse_err(path, offset, "row needs a label and at least one feature"));
        }
        match dim {
            None => dim = Some(rec.len() - 1),
            Some(d) if d != rec.len() - 1 => {
                return Err(parse_err(
                    path,
                    offset,
                    format!("row has {} features, expected {d}", rec.len() - 1),
                ))
            }
            _ => {}
        }
        let label: usize = rec[0]
            .parse()
            .map_err(|_| parse_err(path, offset, format!("bad label {:?}", &rec[0])))?;
        labels.push(label);
        for (j, f) in rec.iter().skip(1).enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(path, offset, format!("bad value {f:?} in column {}", j + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(path, offset, format!("non-finite value in column {}", j + 1)));
            }
            values.push(v);
        }
    }
    let Some(dim) = dim else {
        return Err(Error::EmptyDataset);
    };
    Dataset::new(Tensor::new(vec![labels.len(), dim], values)?, labels)
}

pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| parse_err(path, 0, e.to_string()))?;
    for i in 0..data.len() {
        let mut row = vec![data.labels()[i].to_string()];
        row.extend(data.sample(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&row).map_err(|e| parse_err(path, 0, e.to_string()))?;
    }
    w.flush().map_err(|e| io(path, e))
}

fn shuffled(inputs: Vec<f64>, labels: Vec<usize>, dim: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    let mut x = Vec::with_capacity(inputs.len());
    let mut y = Vec::with_capacity(labels.len());
    for &i in &order {
        x.extend_from_slice(&inputs[i * dim..(i + 1) * dim]);
        y.push(labels[i]);
    }
    Dataset::new(Tensor::new(vec![y.len(), dim], x)?, y)
}

/// Gaussian clusters: class means drawn from `N(0, 4·I)`, unit noise.
pub fn synth_blobs(classes: usize, per_class: usize, dim: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::InvalidArgument("synth_blobs needs positive counts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| 2.0 * unit.sample(&mut rng)).collect())
        .collect();
    let mut x = Vec::with_capacity(classes * per_class * dim);
    let mut y = Vec::with_capacity(classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            x.extend(mean.iter().map(|m| m + unit.sample(&mut rng)));
            y.push(c);
        }
    }
    shuffled(x, y, dim, &mut rng)
}

/// Blobs living in a random `intrinsic`-dimensional subspace of an
/// `ambient`-dimensional space, plus isotropic noise of std `noise`.
/// Inputs of this kind leave the first layer's weight numerically
/// rank-deficient after training.
pub fn synth_subspace(
    classes: usize,
    per_class: usize,
    ambient: usize,
    intrinsic: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if intrinsic == 0 || intrinsic > ambient || !(noise >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bad subspace parameters ambient={ambient} intrinsic={intrinsic} noise={noise}"
        )));
    }
    let latent = synth_blobs(classes, per_class, intrinsic, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5b5a);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let basis = Tensor::from_fn(&[ambient, intrinsic], |_| unit.sample(&mut rng) / (intrinsic as f64).sqrt());
    let mut x = latent.inputs().matmul(&basis.transpose()?)?;
    if noise > 0.0 {
        for v in x.data_mut() {
            *v += noise * unit.sample(&mut rng);
        }
    }
    Dataset::new(x, latent.labels().to_vec())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LayerEntry {
    kind: String,
    activation: Activation,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    weight_bits: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    input_quant: Option<ActivationQuantizer>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    dtype: Dtype,
    layers: Vec<LayerEntry>,
}

fn layer_tensors(k: usize, l: &DenseLayer) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    match &l.weight {
        LayerWeight::Dense(w) => out.push((format!("layer{k}.weight"), w)),
        LayerWeight::Factored { left, right } => {
            out.push((format!("layer{k}.left"), left));
            out.push((format!("layer{k}.right"), right));
        }
    }
    out.push((format!("layer{k}.bias"), &l.bias));
    out
}

/// Serializes a model to bytes. `Dtype::F32` rounds every value.
pub fn encode_model(model: &Model, dtype: Dtype) -> Result<Vec<u8>> {
    let mut layers = Vec::new();
    let mut blobs: Vec<&Tensor> = Vec::new();
    for (k, l) in model.layers().iter().enumerate() {
        let ts = layer_tensors(k, l);
        layers.push(LayerEntry {
            kind: if l.is_factored() { "factored" } else { "dense" }.into(),
            activation: l.activation,
            rank: l.rank(),
            weight_bits: l.weight_bits,
            input_quant: l.input_quant,
            tensors: ts
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        });
        blobs.extend(ts.into_iter().map(|(_, t)| t));
    }
    let manifest = serde_json::to_vec(&Manifest { dtype, layers })?;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for t in blobs {
        for &v in t.data() {
            match dtype {
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<Model> {
    if bytes.len() < 16 || &bytes[0..4] != MODEL_MAGIC {
        return Err(parse_err(path, 0, "missing LLCM header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported version {version}, expected {MODEL_VERSION}"
        )));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let manifest_bytes = bytes
        .get(16..16 + mlen)
        .ok_or_else(|| parse_err(path, 16, "manifest extends past end of file"))?;
    let manifest: Manifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| parse_err(path, 16, format!("manifest: {e}")))?;
    let width = manifest.dtype.width();
    let mut pos = 16 + mlen;
    let mut layers = Vec::new();
    for (k, entry) in manifest.layers.iter().enumerate() {
        let mut ts = Vec::new();
        for te in &entry.tensors {
            let n: usize = te.shape.iter().product();
            let chunk = bytes.get(pos..pos + n * width).ok_or_else(|| {
                Error::ModelFormat(format!(
                    "tensor {} truncated: needs {} bytes at offset {pos}, file has {}",
                    te.name,
                    n * width,
                    bytes.len()
                ))
            })?;
            let data: Vec<f64> = match manifest.dtype {
                Dtype::F64 => chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                Dtype::F32 => chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            ts.push(Tensor::new(te.shape.clone(), data).map_err(|e| Error::ModelFormat(format!("tensor {}: {e}", te.name)))?);
            pos += n * width;
        }
        let mut layer = match (entry.kind.as_str(), ts.len()) {
            ("dense", 2) => {
                let bias = ts.pop().unwrap();
                DenseLayer::new(ts.pop().unwrap(), bias, entry.activation)?
            }
            ("factored", 3) => {
                let bias = ts.pop().unwrap();
                let right = ts.pop().unwrap();
                let left = ts.pop().unwrap();
                if entry.rank != Some(left.cols()) {
                    return Err(Error::ModelFormat(format!(
                        "layer {k}: manifest rank {:?} but factors have rank {}",
                        entry.rank,
                        left.cols()
                    )));
                }
                DenseLayer::factored(left, right, bias, entry.activation)?
            }
            (kind, n) => {
                return Err(Error::ModelFormat(format!("layer {k}: bad kind {kind:?} with {n} tensors")));
            }
        };
        layer.weight_bits = entry.weight_bits;
        layer.input_quant = entry.input_quant;
        layers.push(layer);
    }
    if pos != bytes.len() {
        return Err(parse_err(path, pos, "trailing bytes after last tensor"));
    }
    Model::new(layers)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    save_model_as(model, path, Dtype::F64)
}

pub fn save_model_as(model: &Model, path: &Path, dtype: Dtype) -> Result<()> {
    let bytes = encode_model(model, dtype)?;
    fs::write(path, bytes).map_err(|e| io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    decode_model(&read(path)?, path)
}

/// Loss and accuracy of the original and compressed models on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    pub original_loss: f64,
    pub compressed_loss: f64,
    pub original_top1: f64,
    pub compressed_top1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDecision {
    pub layer: usize,
    pub outer_index: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub level: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rank: Option<usize>,
    pub bytes_before: u64,
    pub bytes_after: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub predicted_cost: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub level: String,
    pub loss: f64,
    pub top1: f64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    /// Calibration split.
    pub original_loss: f64,
    pub compressed_loss: f64,
    pub original_top1: f64,
    pub compressed_top1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub heldout: Option<SplitEval>,
    pub original_bytes: u64,
    pub compressed_bytes: u64,
    pub drop_rate: f64,
    pub layers: Vec<LayerDecision>,
    pub curves: Vec<CurvePoint>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pass: Option<bool>,
}

pub fn drop_rate(original_bytes: u64, compressed_bytes: u64) -> f64 {
    if original_bytes == 0 {
        return 0.0;
    }
    1.0 - compressed_bytes as f64 / original_bytes as f64
}

impl Report {
    pub fn new(command: &str, calib: &SplitEval, original_bytes: u64, compressed_bytes: u64) -> Self {
        Self {
            command: command.into(),
            original_loss: calib.original_loss,
            compressed_loss: calib.compressed_loss,
            original_top1: calib.original_top1,
            compressed_top1: calib.compressed_top1,
            heldout: None,
            original_bytes,
            compressed_bytes,
            drop_rate: drop_rate(original_bytes, compressed_bytes),
            layers: Vec::new(),
            curves: Vec::new(),
            pass: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("level,loss,top1,bytes\n");
        for c in &self.curves {
            s.push_str(&format!("{},{:?},{:?},{}\n", c.level, c.loss, c.top1, c.bytes));
        }
        s
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io(path, e))
}

/// Writes the report as JSON and, when `csv` is given, its curves as CSV.
pub fn emit_report(report: &Report, json: &Path, csv: Option<&Path>) -> Result<()> {
    write_text(json, &(report.to_json()? + "\n"))?;
    if let Some(p) = csv {
        write_text(p, &report.curves_csv())?;
    }
    Ok(())
}

pub fn load_report(path: &Path) -> Result<Report> {
    Ok(serde_json::from_slice(&read(path)?)?)
}

/// Resolves the data source named on the command line.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Directory holding the standard MNIST IDX files.
    Idx(PathBuf),
    Csv(PathBuf),
    /// Seeded Gaussian blobs: classes, per class, dim.
    Synth { classes: usize, per_class: usize, dim: usize },
}

pub fn load_source(src: &DataSource, seed: u64) -> Result<Dataset> {
    match src {
        DataSource::Idx(dir) => {
            if dir.is_dir() {
                load_mnist_dir(dir, true)
            } else {
                Err(Error::InvalidArgument(format!("{} is not a directory", dir.display())))
            }
        }
        DataSource::Csv(p) => load_csv(p),
        DataSource::Synth {
            classes,
            per_class,
            dim,
        } => synth_blobs(*classes, *per_class, *dim, seed),
    }
}
