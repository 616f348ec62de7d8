//! Batch pipeline front end: simulate -> solve -> extract -> train ->
//! predict -> evaluate. Every command is deterministic given its inputs and
//! the --seed flag; no wall-clock entropy reaches any output file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pcnet::eval::{
    compare_methods, method_estimates, write_geojson, write_summary_csv, write_timeseries_csv,
    Method,
};
use pcnet::features::{
    extract_features, make_label, CorrectionLabel, FeatureRow, FeatureSet, FEATURE_DIM,
};
use pcnet::geodesy::EcefPosition;
use pcnet::model::{load_trace, LoadOptions, Trace, TraceFormat};
use pcnet::pinet::{
    load_model, predict_correction, save_model, train, AdamConfig, LabeledSet, TrainConfig,
};
use pcnet::simulate::{gen_corpus, SimConfig};
use pcnet::solver::{kf_track, rwls_solve, wls_solve, KfConfig, PositionFix, SolverConfig};

#[derive(Parser)]
#[command(name = "pcnet", about = "GNSS positioning pipeline: solvers, features, set network, evaluation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of traces as canonical CSVs.
    Simulate {
        /// Scenario config file (key = value).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the corpus.
        #[arg(long)]
        output: PathBuf,
        /// Master seed; overrides the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of traces to generate.
        #[arg(long, default_value_t = 20)]
        traces: usize,
    },
    /// Solve a trace epoch-by-epoch and write a fixes CSV.
    Solve {
        /// Trace epochs CSV.
        #[arg(long)]
        input: PathBuf,
        /// Fixes CSV to write.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "canonical_csv")]
        format: String,
        /// wls | rwls | kf
        #[arg(long, default_value = "rwls")]
        method: String,
    },
    /// Extract per-satellite feature sets (and labels when truth is given).
    Extract {
        /// Trace epochs CSV.
        #[arg(long)]
        input: PathBuf,
        /// Fixes CSV from `solve`.
        #[arg(long)]
        fixes: PathBuf,
        /// Ground-truth CSV; enables label columns.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Features CSV to write.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "canonical_csv")]
        format: String,
    },
    /// Train the correction network on extracted feature CSVs.
    Train {
        /// Features CSV file, or a directory of *.features.csv.
        #[arg(long)]
        input: PathBuf,
        /// Model file to write; history CSV lands next to it.
        #[arg(long)]
        output: PathBuf,
        /// Training config file (key = value).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Solve a trace and apply the trained correction network.
    Predict {
        /// Trace epochs CSV.
        #[arg(long)]
        input: PathBuf,
        /// Corrected fixes CSV to write.
        #[arg(long)]
        output: PathBuf,
        /// Trained model file.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "canonical_csv")]
        format: String,
    },
    /// Compare methods over a corpus directory and emit report files.
    Evaluate {
        /// Corpus directory with <id>_epochs.csv / <id>_truth.csv pairs.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for summary.csv, timeseries.csv, tracks.geojson.
        #[arg(long)]
        output: PathBuf,
        /// Comma-separated subset of wls,rwls,kf,pcdeepnet.
        #[arg(long, default_value = "wls,rwls,kf")]
        method: String,
        /// Trained model file; required when pcdeepnet is requested.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "canonical_csv")]
        format: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type AnyError = Box<dyn std::error::Error>;

fn run(command: Command) -> Result<(), AnyError> {
    match command {
        Command::Simulate { config, output, seed, traces } => {
            let mut sim = match config {
                Some(path) => SimConfig::from_kv_file(&path)?,
                None => SimConfig::default(),
            };
            if let Some(s) = seed {
                sim.seed = s;
            }
            let manifest = gen_corpus(&sim, traces, (0.75, 0.10, 0.15), &output)?;
            println!(
                "wrote {} traces to {} (train {}, val {}, test {})",
                manifest.entries.len(),
                output.display(),
                manifest.train.len(),
                manifest.val.len(),
                manifest.test.len()
            );
            Ok(())
        }
        Command::Solve { input, output, format, method } => {
            let trace = read_trace(&input, None, &format)?;
            let solver = SolverConfig::default();
            let fixes = solve_trace(&trace, &method, &solver)?;
            write_fixes_csv(&trace.trace_id, &fixes, &output)?;
            println!("wrote {} fixes to {}", fixes.len(), output.display());
            Ok(())
        }
        Command::Extract { input, fixes, truth, output, format } => {
            let trace = read_trace(&input, truth.as_deref(), &format)?;
            let fix_map = read_fixes_csv(&fixes)?;
            let mut sets = Vec::new();
            for epoch in &trace.epochs {
                let Some(fix) = fix_map.get(&epoch.time_ms) else { continue };
                if !fix.converged {
                    continue;
                }
                let mut set = extract_features(epoch, fix)?;
                if let Some(gt) = trace.ground_truth_at(epoch.time_ms) {
                    set.label = Some(make_label(fix, gt)?);
                }
                sets.push(set);
            }
            write_features_csv(&trace.trace_id, &sets, &output)?;
            println!("wrote {} feature sets to {}", sets.len(), output.display());
            Ok(())
        }
        Command::Train { input, output, config, seed } => {
            let dataset = read_features(&input)?;
            let mut train_config = match config {
                Some(path) => train_config_from_kv(&path)?,
                None => TrainConfig::default(),
            };
            train_config.seed = seed;
            let (model, history) = train(&dataset, &train_config)?;
            save_model(&model, &output)?;
            let history_path = output.with_extension("history.csv");
            let mut text = String::from("epoch,train_mse,val_mse\n");
            for (i, (t, v)) in history.epochs.iter().enumerate() {
                text.push_str(&format!("{i},{t},{v}\n"));
            }
            fs::write(&history_path, text)?;
            println!(
                "trained on {} sets ({} traces); best epoch {}; model at {}",
                dataset.len(),
                history.train_traces.len() + history.val_traces.len() + history.test_traces.len(),
                history.best_epoch,
                output.display()
            );
            Ok(())
        }
        Command::Predict { input, output, model, format } => {
            let trace = read_trace(&input, None, &format)?;
            let net = load_model(&model)?;
            let solver = SolverConfig::default();
            let mut fixes = Vec::new();
            for epoch in &trace.epochs {
                let Ok(fix) = rwls_solve(epoch, &solver) else { continue };
                let correction = predict_correction(&net, epoch, &fix)?;
                let mut corrected = fix.clone();
                corrected.position = pcnet::features::apply_correction(&fix.position, &correction);
                fixes.push((epoch.time_ms, corrected));
            }
            write_fixes_csv(&trace.trace_id, &fixes, &output)?;
            println!("wrote {} corrected fixes to {}", fixes.len(), output.display());
            Ok(())
        }
        Command::Evaluate { input, output, method, model, format } => {
            let methods = parse_methods(&method)?;
            let traces = read_corpus(&input, &format)?;
            let net = match model {
                Some(path) => Some(load_model(&path)?),
                None => None,
            };
            let solver = SolverConfig::default();
            let kf = KfConfig::default();
            let (reports, series) =
                compare_methods(&traces, &methods, &solver, &kf, net.as_ref())?;
            fs::create_dir_all(&output)?;
            write_summary_csv(&reports, &output.join("summary.csv"))?;
            write_timeseries_csv(&series, &output.join("timeseries.csv"))?;
            let mut tracks = Vec::new();
            for &m in &methods {
                for trace in &traces {
                    if let Ok((ests, _)) = method_estimates(trace, m, &solver, &kf, net.as_ref())
                    {
                        tracks.push((m, trace.trace_id.clone(), ests));
                    }
                }
            }
            write_geojson(&traces, &tracks, &output.join("tracks.geojson"))?;
            for r in &reports {
                println!("{}: score {:.3} m over {} traces", r.method, r.score_m, r.traces.len());
            }
            Ok(())
        }
    }
}

fn parse_format(s: &str) -> Result<TraceFormat, AnyError> {
    Ok(s.parse::<TraceFormat>()?)
}

fn parse_methods(s: &str) -> Result<Vec<Method>, AnyError> {
    let methods: Result<Vec<Method>, _> =
        s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect();
    let methods = methods?;
    if methods.is_empty() {
        return Err("no methods requested".into());
    }
    Ok(methods)
}

fn read_trace(
    epochs: &Path,
    truth: Option<&Path>,
    format: &str,
) -> Result<Trace, AnyError> {
    let format = parse_format(format)?;
    let (trace, _) = load_trace(epochs, truth, format, &LoadOptions::default())?;
    Ok(trace)
}

/// A corpus directory is any set of `<id>_epochs.csv` files with matching
/// `<id>_truth.csv` companions.
fn read_corpus(dir: &Path, format: &str) -> Result<Vec<Trace>, AnyError> {
    let mut names: Vec<String> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix("_epochs.csv") {
            names.push(stem.to_string());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(format!("no *_epochs.csv files in {}", dir.display()).into());
    }
    let mut traces = Vec::new();
    for stem in names {
        let truth = dir.join(format!("{stem}_truth.csv"));
        let truth = truth.exists().then_some(truth);
        traces.push(read_trace(&dir.join(format!("{stem}_epochs.csv")), truth.as_deref(), format)?);
    }
    Ok(traces)
}

fn solve_trace(
    trace: &Trace,
    method: &str,
    solver: &SolverConfig,
) -> Result<Vec<(i64, PositionFix)>, AnyError> {
    let mut fixes = Vec::new();
    match method {
        "wls" | "rwls" => {
            for epoch in &trace.epochs {
                let fix = if method == "wls" {
                    wls_solve(epoch, solver, None)
                } else {
                    rwls_solve(epoch, solver)
                }?;
                fixes.push((epoch.time_ms, fix));
            }
        }
        "kf" => {
            let track = kf_track(trace, solver, &KfConfig::default())?;
            for (epoch, fix) in trace.epochs.iter().zip(track) {
                fixes.push((epoch.time_ms, fix));
            }
        }
        other => return Err(format!("unknown solve method: {other}").into()),
    }
    Ok(fixes)
}

fn write_fixes_csv(
    trace_id: &str,
    fixes: &[(i64, PositionFix)],
    path: &Path,
) -> Result<(), AnyError> {
    let mut out = String::from("trace_id,time_ms,x_m,y_m,z_m,clk_m,gdop,converged,n_sats\n");
    for (time_ms, fix) in fixes {
        out.push_str(&format!(
            "{trace_id},{time_ms},{},{},{},{},{},{},{}\n",
            fix.position.x,
            fix.position.y,
            fix.position.z,
            fix.clock_bias,
            fix.gdop,
            fix.converged,
            fix.residuals.len(),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_fixes_csv(path: &Path) -> Result<BTreeMap<i64, PositionFix>, AnyError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut fixes = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let r = record?;
        let field = |j: usize| -> Result<&str, AnyError> {
            r.get(j).ok_or_else(|| {
                format!("{}: row {}: missing column {j}", path.display(), i + 2).into()
            })
        };
        let num = |j: usize| -> Result<f64, AnyError> { Ok(field(j)?.parse()?) };
        let time_ms: i64 = field(1)?.parse()?;
        let n_sats: usize = field(8)?.parse()?;
        fixes.insert(
            time_ms,
            PositionFix {
                position: EcefPosition::new(num(2)?, num(3)?, num(4)?),
                clock_bias: num(5)?,
                gdop: num(6)?,
                residuals: vec![0.0; n_sats],
                iterations: 0,
                converged: field(7)?.parse()?,
            },
        );
    }
    Ok(fixes)
}

fn write_features_csv(
    trace_id: &str,
    sets: &[FeatureSet],
    path: &Path,
) -> Result<(), AnyError> {
    let mut out = String::from(
        "trace_id,time_ms,pr_residual_m,g_x,g_y,g_z,gdop,elevation_deg,cn0_dbhz,\
         label_dx_m,label_dy_m,label_dz_m\n",
    );
    for set in sets {
        let label = set
            .label
            .as_ref()
            .map(|l| format!("{},{},{}", l.dx, l.dy, l.dz))
            .unwrap_or_else(|| ",,".to_string());
        for row in &set.rows {
            out.push_str(&format!(
                "{trace_id},{},{},{},{},{},{},{},{},{label}\n",
                set.epoch_time,
                row.pr_residual,
                row.g_x,
                row.g_y,
                row.g_z,
                row.gdop,
                row.elevation,
                row.cn0,
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_features_file(path: &Path, dataset: &mut Vec<LabeledSet>) -> Result<(), AnyError> {
    let mut reader = csv::Reader::from_path(path)?;
    // (trace, time) -> rows + label, insertion-ordered by first appearance.
    let mut groups: BTreeMap<(String, i64), FeatureSet> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let r = record?;
        if r.len() < 9 {
            return Err(format!(
                "{}: row {}: expected >= 9 columns, got {}",
                path.display(),
                i + 2,
                r.len()
            )
            .into());
        }
        let trace_id = r.get(0).unwrap().to_string();
        let time_ms: i64 = r.get(1).unwrap().parse()?;
        let mut a = [0.0f64; FEATURE_DIM];
        for (j, slot) in a.iter_mut().enumerate() {
            *slot = r.get(2 + j).unwrap().parse()?;
        }
        let label = match (r.get(9), r.get(10), r.get(11)) {
            (Some(dx), Some(dy), Some(dz)) if !dx.is_empty() => Some(CorrectionLabel {
                dx: dx.parse()?,
                dy: dy.parse()?,
                dz: dz.parse()?,
            }),
            _ => None,
        };
        let entry = groups.entry((trace_id, time_ms)).or_insert_with(|| FeatureSet {
            epoch_time: time_ms,
            rows: Vec::new(),
            label: None,
        });
        entry.rows.push(FeatureRow::from_array(a));
        if entry.label.is_none() {
            entry.label = label;
        }
    }
    for ((trace_id, _), set) in groups {
        dataset.push(LabeledSet { trace_id, set });
    }
    Ok(())
}

fn read_features(input: &Path) -> Result<Vec<LabeledSet>, AnyError> {
    let mut dataset = Vec::new();
    if input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(format!("no .csv files in {}", input.display()).into());
        }
        for f in files {
            read_features_file(&f, &mut dataset)?;
        }
    } else {
        read_features_file(input, &mut dataset)?;
    }
    Ok(dataset)
}

fn train_config_from_kv(path: &Path) -> Result<TrainConfig, AnyError> {
    let text = fs::read_to_string(path)?;
    let mut c = TrainConfig::default();
    let mut adam = AdamConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", idx + 1))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "max_epochs" => c.max_epochs = value.parse()?,
            "batch_size" => c.batch_size = value.parse()?,
            "learning_rate" => adam.lr = value.parse()?,
            "output_dim" => c.output_dim = value.parse()?,
            "seed" => c.seed = value.parse()?,
            other => return Err(format!("line {}: unknown key {other}", idx + 1).into()),
        }
    }
    c.adam = adam;
    Ok(c)
}
