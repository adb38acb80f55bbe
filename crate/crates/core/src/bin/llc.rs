use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use llc::data_io::DataSource;
use llc::pipeline::{
    cmd_bounds, cmd_calibrate, cmd_decompose, cmd_quantize, cmd_train_fixture, cmd_verify, init_threads, Capacity,
    RunConfig, VerifySplit,
};
use llc::quant::ScaleMode;

#[derive(Parser)]
#[command(name = "llc", version, about = "Post-training compression that does not raise calibration loss")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the default MLP on the data and write it to --out-model.
    TrainFixture,
    /// Write per-layer mean gradients of the calibration split.
    Calibrate,
    /// Sweep noise magnitudes and report first/second-order prediction gaps.
    Bounds,
    /// Allocate bit widths under a byte budget and quantize.
    Quantize,
    /// Factor eligible layers by rank search.
    Decompose,
    /// Compare --model against a compressed model; exit 2 on FAIL.
    Verify {
        #[arg(long)]
        compressed: PathBuf,
        /// Allowed loss increase.
        #[arg(long, default_value_t = 0.0)]
        tol_abs: f64,
        #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
        split: SplitArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Idx,
    Csv,
    Synth,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Calibration,
    Heldout,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Absmax,
    Aciq,
}

#[derive(Args)]
struct Opts {
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// IDX directory, CSV file, or `classes,per_class,dim` for synth.
    #[arg(long, global = true)]
    data: Option<String>,
    #[arg(long, value_enum, global = true, default_value_t = Format::Synth)]
    data_format: Format,
    #[arg(long, global = true, conflicts_with = "drop_rate")]
    capacity_bytes: Option<u64>,
    #[arg(long, global = true)]
    drop_rate: Option<f64>,
    /// Comma-separated levels, e.g. `fp,16,8,4` (add 2 to allow 2-bit).
    #[arg(long, global = true, default_value = "fp,16,8,4")]
    levels: String,
    #[arg(long, global = true, default_value_t = 1e-4)]
    error_max: f64,
    #[arg(long, global = true, default_value_t = 1e-4)]
    gamma: f64,
    /// Read --gamma as a fraction of each weight's Frobenius norm.
    #[arg(long, global = true)]
    relative_gamma: bool,
    /// Stop each layer at its lowest lossless rank.
    #[arg(long, global = true)]
    first_lossless: bool,
    #[arg(long, global = true)]
    rank_max: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value_t = 0.2)]
    calib_frac: f64,
    #[arg(long, value_enum, global = true, default_value_t = ScaleArg::Absmax)]
    scale_mode: ScaleArg,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    out_report: Option<PathBuf>,
    #[arg(long, global = true)]
    out_model: Option<PathBuf>,
    #[arg(long, global = true)]
    curves_csv: Option<PathBuf>,
}

fn config(o: &Opts) -> llc::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    cfg.data = match (o.data_format, &o.data) {
        (Format::Idx, Some(p)) => DataSource::Idx(p.into()),
        (Format::Csv, Some(p)) => DataSource::Csv(p.into()),
        (Format::Idx | Format::Csv, None) => {
            return Err(llc::Error::InvalidArgument("--data is required for idx and csv".into()))
        }
        (Format::Synth, None) => cfg.data,
        (Format::Synth, Some(spec)) => {
            let n: Vec<usize> = spec
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| llc::Error::InvalidArgument(format!("bad synth spec {spec:?}")))?;
            let [classes, per_class, dim] = n[..] else {
                return Err(llc::Error::InvalidArgument("synth spec is classes,per_class,dim".into()));
            };
            DataSource::Synth { classes, per_class, dim }
        }
    };
    cfg.model = o.model.clone();
    cfg.capacity = match (o.capacity_bytes, o.drop_rate) {
        (Some(b), _) => Some(Capacity::Bytes(b)),
        (None, Some(d)) => Some(Capacity::DropRate(d)),
        (None, None) => None,
    };
    cfg.levels = o.levels.split(',').map(str::parse).collect::<llc::Result<_>>()?;
    cfg.error_max = o.error_max;
    cfg.gamma = o.gamma;
    cfg.relative_gamma = o.relative_gamma;
    cfg.first_lossless = o.first_lossless;
    cfg.rank_max = o.rank_max;
    cfg.seed = o.seed;
    cfg.calib_frac = o.calib_frac;
    cfg.quant.scale_mode = match o.scale_mode {
        ScaleArg::Absmax => ScaleMode::AbsMax,
        ScaleArg::Aciq => ScaleMode::Aciq,
    };
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    cfg.out_report = o.out_report.clone();
    cfg.out_model = o.out_model.clone();
    cfg.curves_csv = o.curves_csv.clone();
    Ok(cfg)
}

fn run(cli: Cli) -> llc::Result<bool> {
    init_threads()?;
    let mut cfg = config(&cli.opts)?;
    match cli.cmd {
        Cmd::TrainFixture => {
            let r = cmd_train_fixture(&cfg)?;
            println!("trained: loss {:.6e} top1 {:.4} ({} bytes)", r.original_loss, r.original_top1, r.original_bytes);
        }
        Cmd::Calibrate => {
            let p = cmd_calibrate(&cfg)?;
            println!("calibrated {} layers on {} samples, mean loss {:.6e}", p.layers.len(), p.sample_count, p.mean_loss);
        }
        Cmd::Bounds => {
            println!("target       magnitude  regime       gap_first    gap_second");
            for r in cmd_bounds(&cfg)? {
                println!(
                    "{:<12} {:<10.0e} {:<12} {:<12.4e} {:.4e}",
                    format!("{:?}", r.target),
                    r.magnitude,
                    format!("{:?}", r.regime),
                    r.gap_first,
                    r.gap_second
                );
            }
        }
        Cmd::Quantize => {
            let r = cmd_quantize(&cfg)?;
            let levels: Vec<&str> = r.layers.iter().map(|d| d.level.as_deref().unwrap_or("-")).collect();
            println!("levels (input to output): {}", levels.join(" "));
            println!("drop rate {:.4}, calibration loss {:.6e} -> {:.6e}", r.drop_rate, r.original_loss, r.compressed_loss);
        }
        Cmd::Decompose => {
            let out = cmd_decompose(&cfg)?;
            let r = &out.report;
            let ranks: Vec<String> = r.layers.iter().map(|d| d.rank.map_or("-".into(), |k| k.to_string())).collect();
            println!("ranks (input to output): {}", ranks.join(" "));
            println!("drop rate {:.4}, calibration loss {:.6e} -> {:.6e}", r.drop_rate, r.original_loss, r.compressed_loss);
        }
        Cmd::Verify {
            compressed,
            tol_abs,
            split,
        } => {
            cfg.tol_abs = tol_abs;
            cfg.verify_split = match split {
                SplitArg::Calibration => VerifySplit::Calibration,
                SplitArg::Heldout => VerifySplit::Heldout,
                SplitArg::All => VerifySplit::All,
            };
            let r = cmd_verify(&cfg, &compressed)?;
            let pass = r.pass == Some(true);
            println!(
                "{}: loss {:.9e} -> {:.9e} (delta {:+.3e})",
                if pass { "PASS" } else { "FAIL" },
                r.original_loss,
                r.compressed_loss,
                r.compressed_loss - r.original_loss
            );
            return Ok(pass);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
