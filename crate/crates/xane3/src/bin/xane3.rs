//! Command-line entry point: dataset synthesis, raw-spectrum preprocessing,
//! training, prediction, evaluation, and the verification suites.
//! Exit codes: 0 ok, 2 validation failure, 3 acceptance-check failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xane3::autodiff::{finite_diff_check, Tape, Tensor};
use xane3::dataset::{read_jsonl, variance_baseline, write_jsonl, DatasetRecord};
use xane3::graph::{batch, build_graph, Structure};
use xane3::model::{Mode, Model, ModelConfig};
use xane3::objective::composite_loss;
use xane3::so3::random_rotation;
use xane3::spectra::{normalize_edge_step, BasisSpec, RawSpectrum, SpectrumGrid};
use xane3::synth::{gen_structure, oracle_spectrum, synth_dataset, StructureKind};
use xane3::trainer::{load_checkpoint, predict, train_loop, RunConfig};
use xane3::XaneError;

#[derive(Parser)]
#[command(name = "xane3", about = "Equivariant structure-to-XANES pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset plus its variance-baseline sidecar.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalize raw two-column spectra onto the canonical grid.
    ///
    /// For each line `<name> <e0>` in the E0 list, reads `<name>.dat`
    /// (energy mu) and `<name>.json` (a structure record with an "absorber"
    /// field) from the raw directory.
    Preprocess {
        #[arg(long)]
        raw: PathBuf,
        #[arg(long = "e0-list")]
        e0_list: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes metrics.jsonl and the best-val checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dotted-key config overrides, e.g. --set model.layers=2
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Predict spectra and E0 for every record in a dataset.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-term MSE report (x10^-3) over a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Verify E(3) invariance of predicted spectra under rigid motions.
    CheckEquivariance(CheckEquivarianceArgs),
    /// Finite-difference check of the full composite loss on a tiny config.
    Gradcheck {
        #[arg(long)]
        tiny: bool,
    },
    /// Compare a toggle of the ablation matrix on a small synthetic run.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct CheckEquivarianceArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Use a randomly initialized default model instead of a checkpoint.
    #[arg(long)]
    random: bool,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// One of: layernorm, gated_residual, attention_pool, background,
    /// scalar_only, derivative_loss
    #[arg(long)]
    which: String,
    #[arg(long, default_value_t = 96)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
}

enum CmdError {
    Validation(anyhow::Error),
    Acceptance(String),
}

impl<E: Into<anyhow::Error>> From<E> for CmdError {
    fn from(e: E) -> Self {
        CmdError::Validation(e.into())
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth { n, seed, out } => cmd_synth(n, seed, &out),
        Cmd::Preprocess { raw, e0_list, out } => cmd_preprocess(&raw, &e0_list, &out),
        Cmd::Train {
            config,
            data,
            out,
            set,
        } => cmd_train(config.as_deref(), &data, &out, &set),
        Cmd::Predict { ckpt, input, out } => cmd_predict(&ckpt, &input, &out),
        Cmd::Eval { ckpt, input } => cmd_eval(&ckpt, &input),
        Cmd::CheckEquivariance(args) => cmd_check_equivariance(&args),
        Cmd::Gradcheck { tiny } => cmd_gradcheck(tiny),
        Cmd::Ablate(args) => cmd_ablate(&args),
    };
    match result {
        Ok(()) => {}
        Err(CmdError::Validation(e)) => {
            eprintln!("error: {}", e);
            std::process::exit(2);
        }
        Err(CmdError::Acceptance(msg)) => {
            eprintln!("acceptance-failure: {}", msg);
            std::process::exit(3);
        }
    }
}

fn cmd_synth(n: usize, seed: u64, out: &Path) -> Result<(), CmdError> {
    if n == 0 {
        return Err(XaneError::InvalidArgument("--n must be >= 1".into()).into());
    }
    let grid = SpectrumGrid::canonical();
    let records = synth_dataset(n, seed, &grid)?;
    write_jsonl(out, &records)?;
    let baseline = variance_baseline(&records)?;
    let sidecar = out.with_extension("baseline.json");
    std::fs::write(&sidecar, serde_json::to_string_pretty(&baseline)?)?;
    println!(
        "wrote {} records to {} (variance baseline {:.6e} in {})",
        records.len(),
        out.display(),
        baseline.variance_baseline,
        sidecar.display()
    );
    Ok(())
}

fn cmd_preprocess(raw: &Path, e0_list: &Path, out: &Path) -> Result<(), CmdError> {
    let grid = SpectrumGrid::canonical();
    let list = std::fs::read_to_string(e0_list)?;
    let mut records = Vec::new();
    for (lineno, line) in list.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (name, e0) = match (parts.next(), parts.next()) {
            (Some(n), Some(e)) => (n, e),
            _ => {
                return Err(XaneError::InvalidArgument(format!(
                    "{}:{}: expected '<name> <e0>'",
                    e0_list.display(),
                    lineno + 1
                ))
                .into())
            }
        };
        let e0: f64 = e0.parse().map_err(|_| {
            XaneError::InvalidArgument(format!(
                "{}:{}: bad e0 '{}'",
                e0_list.display(),
                lineno + 1,
                e0
            ))
        })?;
        let spec_path = raw.join(format!("{}.dat", name));
        let struct_path = raw.join(format!("{}.json", name));
        let raw_spec = read_two_column(&spec_path, e0)?;
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&struct_path)?)?;
        let structure: Structure = serde_json::from_value(meta.clone())?;
        let absorber = meta
            .get("absorber")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| {
                XaneError::InvalidArgument(format!(
                    "{}: missing integer 'absorber'",
                    struct_path.display()
                ))
            })? as usize;
        let spectrum = normalize_edge_step(&raw_spec, &grid)?;
        records.push(DatasetRecord {
            lattice: structure.lattice,
            pbc: structure.pbc,
            positions: structure.positions,
            numbers: structure.numbers,
            absorber,
            spectrum,
            e0,
        });
    }
    if records.is_empty() {
        return Err(XaneError::InvalidArgument("no records in e0 list".into()).into());
    }
    write_jsonl(out, &records)?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

fn read_two_column(path: &Path, e0: f64) -> Result<RawSpectrum, CmdError> {
    let text = std::fs::read_to_string(path)?;
    let mut energies = Vec::new();
    let mut mu = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (a, b) = match (parts.next(), parts.next()) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(XaneError::InvalidArgument(format!(
                    "{}:{}: expected two columns",
                    path.display(),
                    lineno + 1
                ))
                .into())
            }
        };
        let parse = |s: &str| -> Result<f64, CmdError> {
            s.parse().map_err(|_| {
                XaneError::InvalidArgument(format!(
                    "{}:{}: bad number '{}'",
                    path.display(),
                    lineno + 1,
                    s
                ))
                .into()
            })
        };
        energies.push(parse(a)?);
        mu.push(parse(b)?);
    }
    Ok(RawSpectrum { energies, mu, e0 })
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    overrides: &[String],
) -> Result<(), CmdError> {
    let mut run = match config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for spec in overrides {
        run.apply_override(spec)?;
    }
    let records = read_jsonl(data)?;
    let outcome = train_loop(&records, &run, Some(out))?;
    println!(
        "trained {} epochs; best val total {:.6e}; test (x10^-3): spec {:.3} grad {:.3} curv {:.3} e0 {:.3}",
        outcome.epochs_run,
        outcome.best_val_total,
        outcome.test_report.spec * 1e3,
        outcome.test_report.grad * 1e3,
        outcome.test_report.curv * 1e3,
        outcome.test_report.e0 * 1e3,
    );
    Ok(())
}

fn cmd_predict(ckpt: &Path, input: &Path, out: &Path) -> Result<(), CmdError> {
    let (model, stats, run) = load_checkpoint(ckpt)?;
    let records = read_jsonl(input)?;
    let preds = predict(&model, &stats, &records, run.train.batch_size)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
    for (spectrum, e0) in preds {
        let row = serde_json::json!({ "spectrum": spectrum, "e0": e0 });
        serde_json::to_writer(&mut f, &row)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    println!("wrote {} predictions to {}", records.len(), out.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, input: &Path) -> Result<(), CmdError> {
    let (model, stats, run) = load_checkpoint(ckpt)?;
    let records = read_jsonl(input)?;
    let preds = predict(&model, &stats, &records, run.train.batch_size)?;
    let grid = SpectrumGrid::canonical();
    let (mut spec, mut grad, mut curv, mut e0) = (0.0, 0.0, 0.0, 0.0);
    for (r, (p, pe0)) in records.iter().zip(&preds) {
        let (dp, d2p) = xane3::spectra::finite_derivatives(p, &grid)?;
        let (dt, d2t) = xane3::spectra::finite_derivatives(&r.spectrum, &grid)?;
        spec += mse(p, &r.spectrum);
        grad += mse(&dp, &dt);
        curv += mse(&d2p, &d2t);
        e0 += (pe0 - r.e0).abs();
    }
    let n = records.len() as f64;
    let (spec, grad, curv, e0) = (spec / n, grad / n, curv / n, e0 / n);
    println!("term           MSE x10^-3");
    println!("spectrum       {:>10.3}", spec * 1e3);
    println!("gradient       {:>10.3}", grad * 1e3);
    println!("curvature      {:>10.3}", curv * 1e3);
    println!("total          {:>10.3}", (spec + grad + curv) * 1e3);
    println!("|dE0| (eV)     {:>10.3}", e0);
    Ok(())
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

fn rigid_motion(
    s: &Structure,
    r: &nalgebra::Matrix3<f64>,
    t: [f64; 3],
    improper: bool,
) -> Structure {
    let sign = if improper { -1.0 } else { 1.0 };
    let rot = |p: &[f64; 3]| {
        [
            sign * (r[(0, 0)] * p[0] + r[(0, 1)] * p[1] + r[(0, 2)] * p[2]),
            sign * (r[(1, 0)] * p[0] + r[(1, 1)] * p[1] + r[(1, 2)] * p[2]),
            sign * (r[(2, 0)] * p[0] + r[(2, 1)] * p[1] + r[(2, 2)] * p[2]),
        ]
    };
    Structure {
        lattice: [rot(&s.lattice[0]), rot(&s.lattice[1]), rot(&s.lattice[2])],
        pbc: s.pbc,
        positions: s
            .positions
            .iter()
            .map(|p| {
                let q = rot(p);
                [q[0] + t[0], q[1] + t[1], q[2] + t[2]]
            })
            .collect(),
        numbers: s.numbers.clone(),
        absorber_sites: s.absorber_sites.clone(),
    }
}

fn model_spectrum(model: &Model, s: &Structure, absorber: usize) -> Result<Vec<f64>, CmdError> {
    let grid = SpectrumGrid::canonical();
    let g = build_graph(s, model.config.r_max, absorber)?;
    let b = batch(&[g])?;
    let mut tape = Tape::new();
    let vars = model.store.inject(&mut tape)?;
    let out = model.forward(&mut tape, &vars, &b, &grid, Mode::Eval, None)?;
    Ok(tape.value(out.spectra).data().to_vec())
}

fn cmd_check_equivariance(args: &CheckEquivarianceArgs) -> Result<(), CmdError> {
    let model = match (&args.ckpt, args.random) {
        (Some(p), false) => load_checkpoint(p)?.0,
        (None, _) => {
            let mut m = Model::new(ModelConfig::default(), args.seed)?;
            // the readout tail is zero-initialized; randomize it so the
            // untrained model emits structure-dependent (non-zero) spectra
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(1));
            for name in ["readout.w2", "readout.b2"] {
                let id = m.store.id(name).unwrap();
                for v in m.store.value_mut(id).data_mut() {
                    *v = rng.gen_range(-0.1..0.1);
                }
            }
            m
        }
        (Some(_), true) => {
            return Err(XaneError::InvalidArgument(
                "--ckpt and --random are mutually exclusive".into(),
            )
            .into())
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(0xE3));
    let mut max_dev: f64 = 0.0;
    for i in 0..5u64 {
        let kind = if i % 2 == 0 {
            StructureKind::Rocksalt
        } else {
            StructureKind::SpinelLike
        };
        let s = gen_structure(1000 + i, kind, 0.05, false)?;
        let absorber = s.absorber_sites[i as usize % s.absorber_sites.len()];
        let base = model_spectrum(&model, &s, absorber)?;
        for _ in 0..args.trials {
            let r = random_rotation(&mut rng);
            let t = [
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            ];
            let improper = rng.gen_bool(0.5);
            let s2 = rigid_motion(&s, &r, t, improper);
            let moved = model_spectrum(&model, &s2, absorber)?;
            for (a, b) in base.iter().zip(&moved) {
                max_dev = max_dev.max((a - b).abs());
            }
        }
    }
    println!("max spectrum deviation over rigid motions: {:.3e}", max_dev);
    if max_dev > 1e-6 {
        return Err(CmdError::Acceptance(format!(
            "equivariance deviation {:.3e} > 1e-6",
            max_dev
        )));
    }
    Ok(())
}

fn cmd_gradcheck(_tiny: bool) -> Result<(), CmdError> {
    // tiny config pinned by the acceptance contract: m=(4,2,1), L=2, K=10
    // basis functions, 8 grid points, a single graph
    let cfg = ModelConfig {
        layers: 2,
        m0: 4,
        m1: 2,
        m2: 1,
        n_radial: 6,
        readout_hidden: 12,
        attention_hidden: 6,
        gate_hidden: 6,
        e0_hidden: 6,
        dropout: 0.0,
        ..Default::default()
    };
    let mut model = Model::with_basis(cfg, BasisSpec::new(10, 2, true), 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for name in ["readout.w2", "readout.b2"] {
        let id = model.store.id(name).unwrap();
        for v in model.store.value_mut(id).data_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
    }
    let grid = SpectrumGrid::uniform(-30.0, 100.0, 8);
    // low-symmetry cluster so no irrep channel degenerates to near-zero
    // features (a near-octahedral cell leaves l=2 gradients at FD noise level)
    let mut pos_rng = ChaCha8Rng::seed_from_u64(17);
    let mut positions = vec![[10.0, 10.0, 10.0]];
    for _ in 0..5 {
        positions.push([
            10.0 + pos_rng.gen_range(-1.6..1.6),
            10.0 + pos_rng.gen_range(-1.6..1.6),
            10.0 + pos_rng.gen_range(-1.6..1.6),
        ]);
    }
    let s = Structure {
        lattice: [[20.0, 0.0, 0.0], [0.0, 20.0, 0.0], [0.0, 0.0, 20.0]],
        pbc: [false, false, false],
        numbers: vec![26, 8, 8, 26, 8, 8],
        positions,
        absorber_sites: vec![0],
    };
    let g = build_graph(&s, model.config.r_max, 0)?;
    let b = batch(&[g])?;
    let (target, e0) = oracle_spectrum(&s, 0, &grid)?;
    let e0z = (e0 - 7112.0) / 0.5;

    let max_rel = finite_diff_check(
        |tape, vars| {
            let out = model.forward(tape, vars, &b, &grid, Mode::Gradcheck, None)?;
            let t = tape.constant(Tensor::from_vec(1, grid.n(), target.clone())?)?;
            let te = tape.constant(Tensor::scalar(e0z))?;
            let (total, _) =
                composite_loss(tape, out.spectra, t, out.e0, te, &grid, 1.0, 1.0, 0.1)?;
            Ok(total)
        },
        &model.store,
        1e-4,
    )?;
    println!("gradcheck max relative error: {:.3e}", max_rel);
    if max_rel > 1e-5 {
        return Err(CmdError::Acceptance(format!(
            "gradient error {:.3e} > 1e-5",
            max_rel
        )));
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<(), CmdError> {
    let grid = SpectrumGrid::canonical();
    let records = synth_dataset(args.n, args.seed.wrapping_add(100), &grid)?;

    let base = |seed: u64| {
        let mut run = RunConfig::default();
        run.model.layers = 2;
        run.model.m0 = 16;
        run.model.m1 = 8;
        run.model.m2 = 4;
        run.train.seed = seed;
        run.train.max_epochs = args.epochs;
        run.loss.anneal_start = args.epochs / 4;
        run.loss.anneal_len = (args.epochs / 4).max(1);
        run
    };
    let on = base(args.seed);
    let mut off = base(args.seed);
    match args.which.as_str() {
        "layernorm" => off.model.use_layernorm = false,
        "gated_residual" => off.model.use_gated_residual = false,
        "attention_pool" => off.model.use_attention_pool = false,
        "background" => off.model.use_background = false,
        "scalar_only" => {
            off.model.m0 = 29; // capacity-matched for the small config
            off.model.m1 = 0;
            off.model.m2 = 0;
            off.model.scalar_only = true;
        }
        "derivative_loss" => {
            off.loss.lambda_grad = 0.0;
            off.loss.lambda_curv = 0.0;
        }
        other => {
            return Err(XaneError::InvalidArgument(format!(
                "unknown ablation '{}'",
                other
            ))
            .into())
        }
    }
    // identical data, split seed, and epoch budget for both arms
    let with = train_loop(&records, &on, None)?;
    let without = train_loop(&records, &off, None)?;
    println!("ablation: {}", args.which);
    println!("arm       spec x10^-3  grad x10^-3  curv x10^-3  e0");
    for (label, r) in [("with", &with.test_report), ("without", &without.test_report)] {
        println!(
            "{:<9} {:>11.3}  {:>11.3}  {:>11.3}  {:>6.3}",
            label,
            r.spec * 1e3,
            r.grad * 1e3,
            r.curv * 1e3,
            r.e0
        );
    }
    Ok(())
}
