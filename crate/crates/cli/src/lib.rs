//! Command line interface: data generation, training, evaluation, symbol
//! export, symbol-class verification, gradient checking, and the k_max
//! sweep, all as subcommands of one executable.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use pdno_core::autodiff::ActKind;
use pdno_core::datagen::{
    gen_burgers, gen_darcy, gen_heat, gen_heat_seq, write_dataset, BurgersSpec, DarcySpec,
    DatasetMeta, HeatSeqSpec, HeatSpec,
};
use pdno_core::grid::Domain;
use pdno_core::operators::PdnoModel;
use pdno_core::symbols::{NetPairSymbol, SymbolNet, SymbolRole};
use pdno_core::training::{
    box_view_to_torus_dataset, evaluate, evaluate_kmax, load_checkpoint, save_checkpoint,
    subsample_dataset, train, window_dataset, Dataset, KmaxOverride, ModelKind, TrainConfig,
};
use pdno_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "pdno",
    version,
    about = "Pseudo-differential neural operators: data generation, training, evaluation, symbol tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset (heat, burgers, darcy, or heat-seq).
    GenData(GenDataArgs),
    /// Train a model from a JSON config on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a trained model on a dataset.
    Eval(EvalArgs),
    /// Export an evaluated symbol on an x or xi lattice as CSV and PDNT.
    ExportSymbol(ExportSymbolArgs),
    /// Run the empirical symbol-class verifier.
    VerifySymbol(VerifySymbolArgs),
    /// Gradient-check a small randomly initialized model.
    GradCheck(GradCheckArgs),
    /// Re-evaluate a model across a list of mode truncations.
    SweepKmax(SweepKmaxArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// One of: heat, burgers, darcy, heat-seq.
    #[arg(long)]
    problem: String,
    /// Stored spatial resolution (box points for darcy).
    #[arg(long)]
    resolution: usize,
    /// Number of samples (initial states for heat/heat-seq).
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for per-sample solvers.
    #[arg(long)]
    threads: Option<usize>,
    /// Heat/heat-seq diffusivity.
    #[arg(long, default_value_t = 0.05)]
    diffusivity: f64,
    /// Burgers viscosity.
    #[arg(long, default_value_t = 0.1)]
    nu: f64,
    /// Burgers solver time step.
    #[arg(long, default_value_t = 2e-4)]
    dt: f64,
    /// Burgers generation resolution before subsampling.
    #[arg(long, default_value_t = 2048)]
    fine_resolution: usize,
    /// Heat training times as a comma list; default 0.05+0.1n, n=0..9.
    #[arg(long)]
    times: Option<String>,
    /// States per trajectory for heat-seq.
    #[arg(long, default_value_t = 21)]
    steps: usize,
    /// Time between trajectory states for heat-seq.
    #[arg(long, default_value_t = 0.05)]
    seq_dt: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file mirroring the training-config fields.
    #[arg(long)]
    config: PathBuf,
    /// Training dataset directory (from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset directory; without it the last tenth of --data is
    /// used for testing.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Subsample both datasets by this factor before training.
    #[arg(long, default_value_t = 1)]
    subsample: usize,
    /// Keep only the first N samples of the training set.
    #[arg(long)]
    train_count: Option<usize>,
    /// Sliding-window length for trajectory datasets (heat-seq).
    #[arg(long)]
    window: Option<usize>,
    // Overrides applied on top of the config file.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    subsample: usize,
    #[arg(long)]
    window: Option<usize>,
    /// Evaluate with this mode truncation instead of the trained setting.
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportSymbolArgs {
    #[arg(long)]
    model: PathBuf,
    /// Lattice kind: "x" or "xi".
    #[arg(long)]
    grid: String,
    /// Layer block index for the iteration-stack model.
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Time value for time-augmented symbols.
    #[arg(long)]
    t: Option<f64>,
    /// Half-width of the xi lattice (xi in [-range, range]).
    #[arg(long, default_value_t = 16.0)]
    range: f64,
    /// Lattice points per axis.
    #[arg(long, default_value_t = 65)]
    density: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifySymbolArgs {
    /// Checkpoint whose xi-symbol networks are verified.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Verify a freshly initialized pair with this activation instead.
    #[arg(long)]
    fresh: Option<String>,
    /// Input dimension for --fresh.
    #[arg(long, default_value_t = 1)]
    dim: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Symbol-class order m.
    #[arg(long)]
    order: f64,
    #[arg(long, default_value_t = 1e4)]
    range: f64,
    #[arg(long, default_value_t = 40)]
    samples: usize,
    #[arg(long, default_value_t = 2)]
    cap: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 16)]
    resolution: usize,
    #[arg(long, default_value_t = 4)]
    width: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepKmaxArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated truncations; "none" means untruncated.
    #[arg(long, default_value = "4,8,12,16,20,none")]
    kmax: String,
    #[arg(long, default_value_t = 1)]
    subsample: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(serde::Serialize)]
struct RunManifest {
    subcommand: String,
    version: String,
    seed: Option<u64>,
    config: serde_json::Value,
    wall_seconds: f64,
}

fn write_manifest(
    dir: &Path,
    subcommand: &str,
    seed: Option<u64>,
    config: serde_json::Value,
    started: Instant,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = RunManifest {
        subcommand: subcommand.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    pdno_core::io::write_json(&dir.join("run-manifest.json"), &manifest)
}

/// Entry point with CLI-style exit codes: 0 success, 1 usage error,
/// 2 runtime failure (or a failing verification verdict).
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version arrive here too, with success status.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ExportSymbol(a) => cmd_export_symbol(a),
        Command::VerifySymbol(a) => cmd_verify_symbol(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::SweepKmax(a) => cmd_sweep_kmax(a),
    }
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get().min(8)).unwrap_or(1)
}

fn cmd_gen_data(a: GenDataArgs) -> Result<i32> {
    let started = Instant::now();
    let threads = a.threads.unwrap_or_else(default_threads);
    let (inputs, outputs, times, meta): (_, _, Option<Vec<f64>>, DatasetMeta) =
        match a.problem.as_str() {
            "heat" => {
                let times: Vec<f64> = match &a.times {
                    Some(list) => list
                        .split(',')
                        .map(|s| {
                            s.trim()
                                .parse::<f64>()
                                .map_err(|_| Error::invalid(format!("bad time value '{s}'")))
                        })
                        .collect::<Result<_>>()?,
                    None => (0..10).map(|k| 0.05 + 0.1 * k as f64).collect(),
                };
                let spec = HeatSpec {
                    resolution: a.resolution,
                    states: a.count,
                    times,
                    diffusivity: a.diffusivity,
                    seed: a.seed,
                };
                let (i, o, t, m) = gen_heat(&spec)?;
                (i, o, Some(t), m)
            }
            "burgers" => {
                let spec = BurgersSpec {
                    fine_resolution: a.fine_resolution,
                    resolution: a.resolution,
                    count: a.count,
                    viscosity: a.nu,
                    dt: a.dt,
                    seed: a.seed,
                };
                let (i, o, m) = gen_burgers(&spec, threads)?;
                (i, o, None, m)
            }
            "darcy" => {
                let spec = DarcySpec {
                    box_points: a.resolution,
                    count: a.count,
                    seed: a.seed,
                };
                let (i, o, m) = gen_darcy(&spec, threads)?;
                (i, o, None, m)
            }
            "heat-seq" => {
                let spec = HeatSeqSpec {
                    resolution: a.resolution,
                    count: a.count,
                    steps: a.steps,
                    dt: a.seq_dt,
                    diffusivity: a.diffusivity,
                    seed: a.seed,
                };
                let (i, o, m) = gen_heat_seq(&spec)?;
                (i, o, None, m)
            }
            other => return Err(Error::invalid(format!("unknown problem '{other}'"))),
        };
    write_dataset(&a.out, &inputs, &outputs, times.as_deref(), &meta)?;
    let cfg = serde_json::json!({
        "problem": a.problem,
        "resolution": a.resolution,
        "count": a.count,
        "threads": threads,
    });
    write_manifest(&a.out, "gen-data", Some(a.seed), cfg, started)?;
    println!(
        "wrote {} samples to {} ({:.1}s)",
        inputs.shape[0],
        a.out.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(0)
}

/// Load a dataset directory and apply the standard preprocessing chain:
/// optional subsampling, box-to-torus view for box data, optional
/// trajectory windowing.
fn load_prepared(
    dir: &Path,
    subsample: usize,
    window: Option<usize>,
) -> Result<(Dataset, DatasetMeta)> {
    let meta: DatasetMeta = pdno_core::io::read_json(&dir.join("meta.json"))?;
    let mut ds = Dataset::load(dir)?;
    if subsample > 1 {
        ds = subsample_dataset(&ds, subsample, meta.domain)?;
    }
    if meta.domain == Domain::Box {
        ds = box_view_to_torus_dataset(&ds)?;
    }
    if let Some(w) = window {
        ds = window_dataset(&ds, w)?;
    }
    Ok((ds, meta))
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let started = Instant::now();
    let mut cfg: TrainConfig = pdno_core::io::read_json(&a.config)?;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.k_max {
        cfg.k_max = Some(v);
    }
    if let Some(v) = a.threads {
        cfg.threads = Some(v);
    }
    let (mut train_ds, _meta) = load_prepared(&a.data, a.subsample, a.window)?;
    if let Some(n) = a.train_count {
        if n < train_ds.count() {
            train_ds = train_ds.split(n)?.0;
        }
    }
    let test_ds = match &a.test_data {
        Some(dir) => load_prepared(dir, a.subsample, a.window)?.0,
        None => {
            let n = train_ds.count();
            let split = (n * 9) / 10;
            let (tr, te) = train_ds.split(split.max(1))?;
            train_ds = tr;
            te
        }
    };
    let mut model = pdno_core::training::build_model(&cfg, &train_ds)?;
    let history = train(&mut model, &train_ds, &test_ds, &cfg, Some(&a.out))?;
    let final_test = history.final_test().unwrap_or(f64::NAN);
    save_checkpoint(&a.out.join("checkpoint-final"), &model)?;
    let resolved = serde_json::to_value(&cfg).unwrap_or_default();
    write_manifest(&a.out, "train", Some(cfg.seed), resolved, started)?;
    println!(
        "trained {} epochs: final test relative-L2 {:.6e} (best {:.6e}), {:.1}s",
        cfg.epochs,
        final_test,
        history.best_test().unwrap_or(f64::NAN),
        started.elapsed().as_secs_f64()
    );
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let started = Instant::now();
    let model = load_checkpoint(&a.model)?;
    let (ds, _meta) = load_prepared(&a.data, a.subsample, a.window)?;
    let report = match a.k_max {
        Some(k) => evaluate_kmax(&model, &ds, KmaxOverride::Set(Some(k)))?,
        None => evaluate(&model, &ds)?,
    };
    println!(
        "mean relative-L2 {:.6e} over {} samples",
        report.mean_rel_l2,
        ds.count()
    );
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        pdno_core::io::write_json(
            &out.join("eval.json"),
            &serde_json::json!({
                "mean_rel_l2": report.mean_rel_l2,
                "per_sample": report.per_sample,
                "k_max": a.k_max,
            }),
        )?;
        let cfg = serde_json::json!({
            "model": a.model.display().to_string(),
            "data": a.data.display().to_string(),
            "subsample": a.subsample,
            "k_max": a.k_max,
        });
        write_manifest(out, "eval", None, cfg, started)?;
    }
    Ok(0)
}

fn model_xi_nets(model: &ModelKind, layer: usize) -> Result<(&SymbolNet, &SymbolNet)> {
    match model {
        ModelKind::Pdno(m) => {
            let block = m
                .blocks
                .get(layer)
                .ok_or_else(|| Error::invalid(format!("model has {} layers", m.blocks.len())))?;
            Ok((&block.pdio.xi_re, &block.pdio.xi_im))
        }
        ModelKind::TimePdio(m) => Ok((&m.layer.xi_re, &m.layer.xi_im)),
        ModelKind::Fno(_) => Err(Error::invalid(
            "the tabulated baseline has no symbol networks",
        )),
    }
}

fn lattice_points(d: usize, axis: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut pts = Vec::new();
    match d {
        1 => {
            for &x in axis {
                pts.push(vec![x]);
            }
        }
        2 => {
            for &x in axis {
                for &y in axis {
                    pts.push(vec![x, y]);
                }
            }
        }
        _ => return Err(Error::invalid("export supports 1D and 2D lattices")),
    }
    Ok(pts)
}

fn cmd_export_symbol(a: ExportSymbolArgs) -> Result<i32> {
    let started = Instant::now();
    let model = load_checkpoint(&a.model)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    if a.density < 2 {
        return Err(Error::invalid("need at least two lattice points per axis"));
    }
    let (values, ci, co, points, coord_prefix): (
        Vec<pdno_core::Complex64>,
        usize,
        usize,
        Vec<Vec<f64>>,
        &str,
    ) = match a.grid.as_str() {
        "xi" => {
            let (re, im) = model_xi_nets(&model, a.layer)?;
            if re.time_dependent != a.t.is_some() {
                return Err(Error::invalid(
                    "--t must be given exactly for time-augmented symbols",
                ));
            }
            let d = re.d_in - usize::from(re.time_dependent);
            let axis: Vec<f64> = (0..a.density)
                .map(|i| -a.range + 2.0 * a.range * i as f64 / (a.density - 1) as f64)
                .collect();
            let pts = lattice_points(d, &axis)?;
            let mat = pdno_core::tensor::Tensor::from_vec(
                &[pts.len(), d],
                pts.iter().flatten().copied().collect(),
            )?;
            let vals = pdno_core::symbols::tabulate_xi_symbol(model.store(), re, im, &mat, a.t)?;
            (vals, re.c_in, re.c_out, pts, "xi")
        }
        "x" => {
            let xnet: &SymbolNet = match &model {
                ModelKind::Pdno(m) => m
                    .blocks
                    .get(a.layer)
                    .and_then(|b| b.pdio.x_symbol.as_ref())
                    .ok_or_else(|| Error::invalid("layer has no x-symbol network"))?,
                ModelKind::TimePdio(m) => m
                    .layer
                    .x_symbol
                    .as_ref()
                    .ok_or_else(|| Error::invalid("model has no x-symbol network"))?,
                ModelKind::Fno(_) => {
                    return Err(Error::invalid("the tabulated baseline has no x-symbol"))
                }
            };
            if xnet.time_dependent != a.t.is_some() {
                return Err(Error::invalid(
                    "--t must be given exactly for time-augmented symbols",
                ));
            }
            let d = xnet.d_in - usize::from(xnet.time_dependent);
            let axis: Vec<f64> = (0..a.density).map(|i| i as f64 / a.density as f64).collect();
            let pts = lattice_points(d, &axis)?;
            let mut mat = pdno_core::tensor::Tensor::from_vec(
                &[pts.len(), d],
                pts.iter().flatten().copied().collect(),
            )?;
            if let Some(t) = a.t {
                mat = pdno_core::symbols::with_time(&mat, t);
            }
            let vals = xnet.eval_plain(model.store(), &mat)?;
            let complex: Vec<pdno_core::Complex64> = vals
                .data
                .iter()
                .map(|&v| pdno_core::Complex64::new(v, 0.0))
                .collect();
            (complex, xnet.c_in, xnet.c_out, pts, "x")
        }
        other => return Err(Error::invalid(format!("unknown lattice kind '{other}'"))),
    };
    let d = points[0].len();
    let coord_names: Vec<String> = (0..d).map(|i| format!("{coord_prefix}{i}")).collect();
    let mut csv = format!("{},i,j,re,im\n", coord_names.join(","));
    for (p, pt) in points.iter().enumerate() {
        for i in 0..ci {
            for j in 0..co {
                let z = values[p * ci * co + i * co + j];
                let coords: Vec<String> = pt.iter().map(|v| format!("{v}")).collect();
                csv.push_str(&format!("{},{i},{j},{},{}\n", coords.join(","), z.re, z.im));
            }
        }
    }
    let csv_path = a.out.join("symbol.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let ct = pdno_core::tensor::CTensor::from_vec(&[points.len(), ci, co], values)?;
    pdno_core::io::write_ctensor(&a.out.join("symbol.pdnt"), &ct)?;
    let cfg = serde_json::json!({
        "model": a.model.display().to_string(),
        "grid": a.grid,
        "layer": a.layer,
        "t": a.t,
        "range": a.range,
        "density": a.density,
    });
    write_manifest(&a.out, "export-symbol", None, cfg, started)?;
    println!("wrote {} lattice points to {}", points.len(), a.out.display());
    Ok(0)
}

fn cmd_verify_symbol(a: VerifySymbolArgs) -> Result<i32> {
    let started = Instant::now();
    let loaded;
    let fresh_store;
    let fresh_nets;
    let report = match (&a.model, &a.fresh) {
        (Some(dir), None) => {
            loaded = load_checkpoint(dir)?;
            let (re, im) = model_xi_nets(&loaded, a.layer)?;
            let t = re.time_dependent.then_some(0.5);
            let sym = NetPairSymbol { re, im, store: loaded.store(), t };
            pdno_core::symbols::verify_symbol_class(&sym, a.order, a.range, a.samples, a.cap)?
        }
        (None, Some(act_name)) => {
            let act = ActKind::parse(act_name)?;
            let mut store = pdno_core::ParamStore::new();
            let re = pdno_core::symbols::build_symbol_net(
                &mut store,
                "re",
                SymbolRole::XiSymbolRe,
                a.dim,
                &[64],
                act,
                1,
                1,
                false,
                a.seed,
            )?;
            let im = pdno_core::symbols::build_symbol_net(
                &mut store,
                "im",
                SymbolRole::XiSymbolIm,
                a.dim,
                &[64],
                act,
                1,
                1,
                false,
                a.seed + 1,
            )?;
            fresh_store = store;
            fresh_nets = (re, im);
            let sym = NetPairSymbol {
                re: &fresh_nets.0,
                im: &fresh_nets.1,
                store: &fresh_store,
                t: None,
            };
            pdno_core::symbols::verify_symbol_class(&sym, a.order, a.range, a.samples, a.cap)?
        }
        _ => {
            return Err(Error::invalid(
                "give exactly one of --model or --fresh ACTIVATION",
            ))
        }
    };
    for row in &report.rows {
        println!(
            "alpha {:?}: c_fit {:.4e}, holdout max {:.4e}, ratio {:.3} -> {}",
            row.alpha,
            row.c_fit,
            row.holdout_max,
            row.violation_ratio,
            if row.pass { "pass" } else { "FAIL" }
        );
    }
    println!(
        "symbol class order {}: {} (worst ratio {:.3} over {} sampled points)",
        report.order,
        if report.pass { "PASS" } else { "FAIL" },
        report.worst_violation_ratio,
        report.sampled_points
    );
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        pdno_core::io::write_json(&out.join("report.json"), &report)?;
        let cfg = serde_json::json!({
            "order": a.order,
            "range": a.range,
            "samples": a.samples,
            "cap": a.cap,
            "fresh": a.fresh,
        });
        write_manifest(out, "verify-symbol", Some(a.seed), cfg, started)?;
    }
    Ok(if report.pass { 0 } else { 2 })
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<i32> {
    let started = Instant::now();
    if !a.resolution.is_power_of_two() {
        return Err(Error::invalid("resolution must be a power of two"));
    }
    let arch = pdno_core::operators::PdnoArch {
        in_channels: 1,
        out_channels: 1,
        spatial_dim: 1,
        width: a.width,
        layers: 2,
        sym_hidden: vec![4],
        sym_activation: ActKind::Gelu,
        use_x_symbol: true,
        k_max: None,
        proj_hidden: 8,
    };
    let mut model = PdnoModel::new(arch, a.seed)?;
    // O(1) parameter scales keep every gradient coordinate resolvable by
    // central differences.
    let mut rng = pdno_core::rng::Rng::derive(a.seed, 0x6c);
    for p in &mut model.store.params {
        for v in &mut p.value.data {
            *v = 0.6 * rng.gaussian();
        }
    }
    let n = a.resolution;
    let input_field = pdno_core::grid::GridFunction::new(
        Domain::Torus,
        pdno_core::tensor::Tensor::from_vec(&[1, n], (0..n).map(|_| rng.gaussian()).collect())?,
    )?;
    let input = pdno_core::grid::append_coords(&input_field)?;
    let target =
        pdno_core::tensor::Tensor::from_vec(&[1, n], (0..n).map(|_| rng.gaussian()).collect())?;
    let mut store = model.store.clone();
    let worst = pdno_core::autodiff::grad_check_params(
        &mut store,
        |tape, store| {
            let mut m = model.clone();
            m.store = store.clone();
            let syms = m.eval_symbols(tape, &[n], None)?;
            let iv = tape.constant(input.values.clone());
            let out = m.forward(tape, iv, &syms)?;
            tape.relative_l2(out, &target)
        },
        1e-5,
    )?;
    println!("full-model gradient check: worst relative discrepancy {worst:.3e}");
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        pdno_core::io::write_json(
            &out.join("grad-check.json"),
            &serde_json::json!({"worst": worst, "resolution": a.resolution, "width": a.width}),
        )?;
        let cfg = serde_json::json!({"resolution": a.resolution, "width": a.width});
        write_manifest(out, "grad-check", Some(a.seed), cfg, started)?;
    }
    Ok(if worst < 1e-5 { 0 } else { 2 })
}

fn cmd_sweep_kmax(a: SweepKmaxArgs) -> Result<i32> {
    let started = Instant::now();
    let model = load_checkpoint(&a.model)?;
    let (ds, _meta) = load_prepared(&a.data, a.subsample, None)?;
    let mut rows = String::from("k_max,rel_l2\n");
    for item in a.kmax.split(',') {
        let item = item.trim();
        let (label, km): (String, KmaxOverride) = if item.eq_ignore_ascii_case("none") {
            ("none".into(), KmaxOverride::Set(None))
        } else {
            let k: usize = item
                .parse()
                .map_err(|_| Error::invalid(format!("bad k_max '{item}'")))?;
            (item.into(), KmaxOverride::Set(Some(k)))
        };
        let report = evaluate_kmax(&model, &ds, km)?;
        println!("k_max {label}: relative-L2 {:.6e}", report.mean_rel_l2);
        rows.push_str(&format!("{label},{:.8e}\n", report.mean_rel_l2));
    }
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(&a.out, rows).map_err(|e| Error::io(&a.out, e))?;
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            let cfg = serde_json::json!({
                "model": a.model.display().to_string(),
                "kmax": a.kmax,
            });
            write_manifest(parent, "sweep-kmax", None, cfg, started)?;
        }
    }
    Ok(0)
}
