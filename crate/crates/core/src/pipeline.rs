//! End-to-end stages: calibrate, sweep the error neighborhood, quantize,
//! decompose and verify. Each stage has an in-memory form used by the
//! examples and tests, and a `cmd_*` form that reads and writes files.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::{solve_group_knapsack, Allocation, AllocationProblem, DEFAULT_GRANULARITY};
use crate::calibration::{calibrate, GradientProfile};
use crate::data_io::{
    emit_report, load_model, load_source, save_model, write_text, CurvePoint, DataSource, LayerDecision, Report,
    SplitEval,
};
use crate::error::{Error, Result};
use crate::fixtures::{train_mlp, DEFAULT_HIDDEN};
use crate::lowrank::{decompose_model, DecomposeConfig, RankSearchTrace};
use crate::neighborhood::{measure_gap, GapOptions, Perturbation, Regime, RegimeReport, RegimeThresholds, Target};
use crate::net::{loss_and_accuracy, Dataset, Model, TrainConfig};
use crate::quant::{apply_plan, build_cost_matrices, make_plans, CostMatrices, QuantConfig, QuantLevel};

/// Caps rayon's global pool at `LLC_THREADS` when set. Safe to call twice.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LLC_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("LLC_THREADS={v:?} is not a count")))?;
        if n == 0 {
            return Err(Error::InvalidArgument("LLC_THREADS must be >= 1".into()));
        }
        // Fails only if a pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Capacity {
    Bytes(u64),
    /// Target fractional reduction; becomes `(1 − drop) · original_bytes`.
    DropRate(f64),
}

impl Capacity {
    pub fn total_bytes(self, original: u64) -> Result<u64> {
        match self {
            Capacity::Bytes(b) => Ok(b),
            Capacity::DropRate(d) if (0.0..1.0).contains(&d) => Ok(((1.0 - d) * original as f64).floor() as u64),
            Capacity::DropRate(d) => Err(Error::InvalidArgument(format!("drop rate {d} not in [0, 1)"))),
        }
    }
}

/// Evaluates two models on the same split.
pub fn compare(original: &Model, compressed: &Model, data: &Dataset) -> Result<SplitEval> {
    let (ol, oa) = loss_and_accuracy(original, data)?;
    let (cl, ca) = loss_and_accuracy(compressed, data)?;
    Ok(SplitEval {
        original_loss: ol,
        compressed_loss: cl,
        original_top1: oa,
        compressed_top1: ca,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeOptions {
    pub levels: Vec<QuantLevel>,
    pub capacity: Capacity,
    pub quant: QuantConfig,
    pub granularity: u64,
}

impl Default for QuantizeOptions {
    fn default() -> Self {
        Self {
            levels: QuantLevel::default_levels(),
            capacity: Capacity::DropRate(0.7),
            quant: QuantConfig::default(),
            granularity: DEFAULT_GRANULARITY,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QuantizeOutcome {
    pub model: Model,
    pub profile: GradientProfile,
    pub costs: CostMatrices,
    pub allocation: Allocation,
    pub report: Report,
}

/// Calibrates on `calib`, allocates bit widths under the byte budget and
/// applies the plan. `heldout` only feeds the report.
pub fn quantize(model: &Model, calib: &Dataset, heldout: Option<&Dataset>, opts: &QuantizeOptions) -> Result<QuantizeOutcome> {
    calib.check_compatible(model)?;
    let original_bytes = model.stored_bytes();
    let total = opts.capacity.total_bytes(original_bytes)?;
    let bias: u64 = model.layers().iter().map(|l| l.bias_bytes()).sum();
    let profile = calibrate(model, calib)?;
    let costs = build_cost_matrices(model, calib, &profile, &opts.levels, &opts.quant)?;
    if total <= bias {
        let min_weights: u64 = costs.w.iter().map(|r| *r.iter().min().unwrap()).sum();
        return Err(Error::Infeasible {
            min_bytes: min_weights + bias,
            capacity: total,
        });
    }
    // Biases stay at full precision, so the weights get what is left.
    let problem = AllocationProblem::new(costs.p.clone(), costs.w.clone(), total - bias)?.with_granularity(opts.granularity);
    let allocation = solve_group_knapsack(&problem).map_err(|e| match e {
        Error::Infeasible { min_bytes, .. } => Error::Infeasible {
            min_bytes: min_bytes + bias,
            capacity: total,
        },
        e => e,
    })?;
    let choice: Vec<QuantLevel> = allocation.choices.iter().map(|&j| opts.levels[j]).collect();
    let plans = make_plans(model, calib, &profile, &choice, &opts.quant)?;
    let compressed = apply_plan(model, &profile, &plans, &opts.quant)?;

    let mut report = Report::new("quantize", &compare(model, &compressed, calib)?, original_bytes, compressed.stored_bytes());
    if let Some(h) = heldout {
        report.heldout = Some(compare(model, &compressed, h)?);
    }
    for (k, (&j, (orig, comp))) in allocation
        .choices
        .iter()
        .zip(model.layers().iter().zip(compressed.layers()))
        .enumerate()
    {
        report.layers.push(LayerDecision {
            layer: k,
            outer_index: model.outer_index(k),
            level: Some(opts.levels[j].to_string()),
            rank: None,
            bytes_before: orig.weight_bytes() + orig.bias_bytes(),
            bytes_after: comp.weight_bytes() + comp.bias_bytes(),
            predicted_cost: Some(costs.p[k][j]),
        });
    }
    // One curve point per uniform level, then the allocated plan.
    let (l0, a0) = loss_and_accuracy(model, calib)?;
    for &level in &opts.levels {
        let uniform = vec![level; model.num_layers()];
        let plans = make_plans(model, calib, &profile, &uniform, &opts.quant)?;
        let m = if level.bit_width().is_some() {
            apply_plan(model, &profile, &plans, &opts.quant)?
        } else {
            model.clone()
        };
        let (l, a) = if level.bit_width().is_some() { loss_and_accuracy(&m, calib)? } else { (l0, a0) };
        report.curves.push(CurvePoint {
            level: level.to_string(),
            loss: l,
            top1: a,
            bytes: m.stored_bytes(),
        });
    }
    report.curves.push(CurvePoint {
        level: "plan".into(),
        loss: report.compressed_loss,
        top1: report.compressed_top1,
        bytes: report.compressed_bytes,
    });
    Ok(QuantizeOutcome {
        model: compressed,
        profile,
        costs,
        allocation,
        report,
    })
}

#[derive(Clone, Debug)]
pub struct DecomposeOutcome {
    pub model: Model,
    pub traces: Vec<RankSearchTrace>,
    pub report: Report,
}

/// Factors every eligible layer whose rank search finds a candidate.
pub fn decompose(model: &Model, calib: &Dataset, heldout: Option<&Dataset>, cfg: &DecomposeConfig) -> Result<DecomposeOutcome> {
    let profile = calibrate(model, calib)?;
    let out = decompose_model(model, &profile, cfg, calib)?;
    let mut report = Report::new(
        "decompose",
        &compare(model, &out.model, calib)?,
        model.stored_bytes(),
        out.model.stored_bytes(),
    );
    if let Some(h) = heldout {
        report.heldout = Some(compare(model, &out.model, h)?);
    }
    let mut traces = Vec::new();
    for (c, (orig, comp)) in out.layers.iter().zip(model.layers().iter().zip(out.model.layers())) {
        report.layers.push(LayerDecision {
            layer: c.layer,
            outer_index: c.outer_index,
            level: None,
            rank: c.rank,
            bytes_before: orig.weight_bytes() + orig.bias_bytes(),
            bytes_after: comp.weight_bytes() + comp.bias_bytes(),
            predicted_cost: None,
        });
        if let Some(t) = &c.trace {
            for cand in t.candidates.iter().filter(|c| c.accepted) {
                report.curves.push(CurvePoint {
                    level: format!("L{}r{}", t.layer, cand.rank),
                    loss: cand.measured_loss.unwrap_or(f64::NAN),
                    top1: f64::NAN,
                    bytes: (cand.rank * (c.shape[0] + c.shape[1])) as u64 * 8,
                });
            }
            traces.push(t.clone());
        }
    }
    // NaN cannot go through JSON; top1 of per-rank candidates is not measured.
    report.curves.iter_mut().for_each(|p| {
        if p.top1.is_nan() {
            p.top1 = -1.0;
        }
    });
    Ok(DecomposeOutcome {
        model: out.model,
        traces,
        report,
    })
}

pub const BOUNDS_MAGNITUDES: [f64; 5] = [1e-4, 1e-3, 1e-2, 8e-2, 1e-1];

/// Mean first- and second-order gaps over all layers and `draws` random
/// `±magnitude` draws, one row per `(target, magnitude)`.
pub fn sweep_bounds(model: &Model, data: &Dataset, magnitudes: &[f64], draws: usize, seed: u64) -> Result<Vec<RegimeReport>> {
    let profile = calibrate(model, data)?;
    let mut rows = Vec::new();
    for target in [Target::Activations, Target::Weights] {
        for &mag in magnitudes {
            let regime = RegimeThresholds::for_target(target).classify(mag);
            if mag == 0.0 {
                rows.push(RegimeReport {
                    layer: None,
                    target,
                    magnitude: 0.0,
                    regime: Regime::FirstOrder,
                    gap_first: 0.0,
                    gap_second: 0.0,
                });
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut g1, mut g2, mut n) = (0.0, 0.0, 0.0);
            for _ in 0..draws.max(1) {
                for k in 0..model.num_layers() {
                    let p = Perturbation::random(model, target, k, mag, &mut rng)?;
                    let m = measure_gap(model, data, &profile, &p, GapOptions::default())?;
                    g1 += m.gap_first;
                    g2 += m.gap_second;
                    n += 1.0;
                }
            }
            rows.push(RegimeReport {
                layer: None,
                target,
                magnitude: mag,
                regime,
                gap_first: g1 / n,
                gap_second: g2 / n,
            });
        }
    }
    Ok(rows)
}

/// Which split [`verify`] certifies on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerifySplit {
    Calibration,
    #[default]
    Heldout,
    All,
}

/// PASS iff the compressed loss is at most the original loss plus `tol_abs`.
pub fn verify(original: &Model, compressed: &Model, data: &Dataset, tol_abs: f64) -> Result<Report> {
    if original.input_dim() != compressed.input_dim() || original.num_classes() != compressed.num_classes() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            expected: original.input_dim(),
            got: compressed.input_dim(),
        });
    }
    let eval = compare(original, compressed, data)?;
    let mut r = Report::new("verify", &eval, original.stored_bytes(), compressed.stored_bytes());
    r.pass = Some(eval.compressed_loss <= eval.original_loss + tol_abs);
    Ok(r)
}

/// Settings shared by the file-based commands.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub data: DataSource,
    pub capacity: Option<Capacity>,
    pub levels: Vec<QuantLevel>,
    pub error_max: f64,
    pub gamma: f64,
    pub relative_gamma: bool,
    pub first_lossless: bool,
    pub rank_max: Option<usize>,
    pub seed: u64,
    pub calib_frac: f64,
    pub out_report: Option<PathBuf>,
    pub out_model: Option<PathBuf>,
    pub curves_csv: Option<PathBuf>,
    pub quant: QuantConfig,
    pub granularity: u64,
    pub train: TrainConfig,
    pub tol_abs: f64,
    pub verify_split: VerifySplit,
    pub draws: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            data: DataSource::Synth {
                classes: 10,
                per_class: 150,
                dim: 20,
            },
            capacity: None,
            levels: QuantLevel::default_levels(),
            error_max: 1e-4,
            gamma: 1e-4,
            relative_gamma: false,
            first_lossless: false,
            rank_max: None,
            seed: 0,
            calib_frac: 0.2,
            out_report: None,
            out_model: None,
            curves_csv: None,
            quant: QuantConfig::default(),
            granularity: DEFAULT_GRANULARITY,
            train: TrainConfig::default(),
            tol_abs: 0.0,
            verify_split: VerifySplit::Heldout,
            draws: 10,
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if !(self.calib_frac > 0.0 && self.calib_frac < 1.0) {
            return Err(Error::InvalidArgument(format!("calibration fraction {} not in (0, 1)", self.calib_frac)));
        }
        Ok(())
    }

    fn model(&self) -> Result<Model> {
        let p = self
            .model
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("--model is required".into()))?;
        load_model(p)
    }

    /// `(calibration, held-out)`.
    fn splits(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        load_source(&self.data, self.seed)?.split(self.calib_frac, self.seed)
    }

    fn write_report(&self, r: &Report) -> Result<()> {
        if let Some(p) = &self.out_report {
            emit_report(r, p, self.curves_csv.as_deref())?;
        } else if let Some(c) = &self.curves_csv {
            write_text(c, &r.curves_csv())?;
        }
        Ok(())
    }
}

/// Trains the default MLP on the full dataset and saves it to `out_model`.
pub fn cmd_train_fixture(cfg: &RunConfig) -> Result<Report> {
    let data = load_source(&cfg.data, cfg.seed)?;
    let model = train_mlp(&data, &DEFAULT_HIDDEN, cfg.seed, &cfg.train)?;
    let (loss, top1) = loss_and_accuracy(&model, &data)?;
    let eval = SplitEval {
        original_loss: loss,
        compressed_loss: loss,
        original_top1: top1,
        compressed_top1: top1,
    };
    let r = Report::new("train-fixture", &eval, model.stored_bytes(), model.stored_bytes());
    if let Some(p) = &cfg.out_model {
        save_model(&model, p)?;
    }
    cfg.write_report(&r)?;
    Ok(r)
}

/// Writes the calibration profile as JSON to `out_report`.
pub fn cmd_calibrate(cfg: &RunConfig) -> Result<GradientProfile> {
    let model = cfg.model()?;
    let (calib, _) = cfg.splits()?;
    let profile = calibrate(&model, &calib)?;
    if let Some(p) = &cfg.out_report {
        write_text(p, &(serde_json::to_string_pretty(&profile)? + "\n"))?;
    }
    Ok(profile)
}

pub fn cmd_bounds(cfg: &RunConfig) -> Result<Vec<RegimeReport>> {
    let model = cfg.model()?;
    let (calib, _) = cfg.splits()?;
    let rows = sweep_bounds(&model, &calib, &BOUNDS_MAGNITUDES, cfg.draws, cfg.seed)?;
    if let Some(p) = &cfg.out_report {
        write_text(p, &(serde_json::to_string_pretty(&rows)? + "\n"))?;
    }
    if let Some(p) = &cfg.curves_csv {
        let mut s = String::from("target,magnitude,regime,gap_first,gap_second\n");
        for r in &rows {
            s.push_str(&format!(
                "{},{:e},{:?},{:e},{:e}\n",
                serde_json::to_value(r.target)?.as_str().unwrap_or_default(),
                r.magnitude,
                r.regime,
                r.gap_first,
                r.gap_second
            ));
        }
        write_text(p, &s)?;
    }
    Ok(rows)
}

pub fn cmd_quantize(cfg: &RunConfig) -> Result<Report> {
    let model = cfg.model()?;
    let (calib, heldout) = cfg.splits()?;
    let opts = QuantizeOptions {
        levels: cfg.levels.clone(),
        capacity: cfg
            .capacity
            .ok_or_else(|| Error::InvalidArgument("give --capacity-bytes or --drop-rate".into()))?,
        quant: QuantConfig {
            error_max: cfg.error_max,
            ..cfg.quant
        },
        granularity: cfg.granularity,
    };
    let out = quantize(&model, &calib, Some(&heldout), &opts)?;
    if let Some(p) = &cfg.out_model {
        save_model(&out.model, p)?;
    }
    cfg.write_report(&out.report)?;
    Ok(out.report)
}

pub fn cmd_decompose(cfg: &RunConfig) -> Result<DecomposeOutcome> {
    let model = cfg.model()?;
    let (calib, heldout) = cfg.splits()?;
    let dc = DecomposeConfig {
        gamma: cfg.gamma,
        relative_gamma: cfg.relative_gamma,
        rank_max: cfg.rank_max,
        stop_at_first_lossless: cfg.first_lossless,
        ..Default::default()
    };
    let out = decompose(&model, &calib, Some(&heldout), &dc)?;
    if let Some(p) = &cfg.out_model {
        save_model(&out.model, p)?;
    }
    cfg.write_report(&out.report)?;
    if let Some(p) = &cfg.out_report {
        let tp = p.with_extension("traces.json");
        write_text(&tp, &(serde_json::to_string_pretty(&out.traces)? + "\n"))?;
    }
    Ok(out)
}

/// Compares `cfg.model` (original) against `compressed` on the split chosen
/// by `cfg.verify_split`.
pub fn cmd_verify(cfg: &RunConfig, compressed: &std::path::Path) -> Result<Report> {
    let original = cfg.model()?;
    let compressed = load_model(compressed)?;
    let (calib, heldout) = cfg.splits()?;
    let data = match cfg.verify_split {
        VerifySplit::Calibration => calib,
        VerifySplit::Heldout => heldout,
        VerifySplit::All => calib.concat(&heldout)?,
    };
    let r = verify(&original, &compressed, &data, cfg.tol_abs)?;
    cfg.write_report(&r)?;
    Ok(r)
}
