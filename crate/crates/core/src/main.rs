use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use geoforest::annotation::{load_seeds, Target};
use geoforest::eval::phantom::{phantom_suite, write_suite, PhantomSpec, SUITE_SEEDS};
use geoforest::eval::{compare_modes, score_case, DiceReport};
use geoforest::forest::{load_forest, save_forest};
use geoforest::geodesic::{geodesic_transform, normalize_distance, Connectivity, GeodesicParams};
use geoforest::mhd::{read_label_mhd, read_mhd, write_label_mhd, write_mhd};
use geoforest::pipeline::{run_prediction, run_training, Manifest, Mode, PipelineConfig};
use geoforest::service::{serve, ServiceState};
use geoforest::volume::{normalize_ct, ChannelKind};

#[derive(Parser)]
#[command(name = "geoforest", version, about = "Seeded kidney segmentation with geodesic channels and random forests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalized geodesic distance from one kidney outline.
    Geodesic(GeodesicArgs),
    /// Train a forest on every case of a manifest.
    Train(TrainArgs),
    /// Predict label volumes for manifest cases.
    Predict(PredictArgs),
    /// Score predictions, or cross-validate baseline against geodesic.
    Evaluate(EvaluateArgs),
    /// Write synthetic phantom cases and their manifest.
    Phantom(PhantomArgs),
    /// Run the HTTP service for the annotator.
    Serve(ServeArgs),
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be finite and >= 0, got {v}"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    match non_negative(s)? {
        v if v > 0.0 => Ok(v),
        v => Err(format!("must be > 0, got {v}")),
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Geodesic,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Baseline => Mode::BaselineCtOnly,
            ModeArg::Geodesic => Mode::WithGeodesic,
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<PipelineConfig> {
        let mut config = match &self.config {
            Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        if let Some(m) = self.mode {
            config.mode = m.into();
        }
        Ok(config)
    }
}

#[derive(Args)]
struct GeodesicArgs {
    #[arg(long)]
    ct: PathBuf,
    /// Annotation JSON, or a binary `.mhd` seed mask (then `--target` applies).
    #[arg(long)]
    annotation: PathBuf,
    #[arg(long, value_enum, default_value = "right")]
    target: TargetArg,
    #[arg(long, value_parser = non_negative, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, value_parser = ["6", "26"], default_value = "26")]
    connectivity: String,
    #[arg(long, value_parser = positive, default_value_t = 300.0)]
    d_cap: f64,
    #[arg(long, default_value_t = -200.0, allow_hyphen_values = true)]
    window_lo: f64,
    #[arg(long, default_value_t = 500.0, allow_hyphen_values = true)]
    window_hi: f64,
    /// Write distances in millimeters instead of the normalized channel.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Right,
    Left,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Restrict to these case ids (repeatable).
    #[arg(long = "case")]
    cases: Vec<String>,
    /// Directory for `<case_id>.mhd` label volumes.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory of `<case_id>.mhd` predictions to score against ground truth.
    #[arg(long, requires = "manifest", conflicts_with = "cv")]
    predictions: Option<PathBuf>,
    /// Run k-fold cross-validation of the baseline against the geodesic mode.
    #[arg(long, requires = "manifest")]
    cv: Option<usize>,
    /// Score a single prediction file (with `--truth`).
    #[arg(long, requires = "truth", conflicts_with_all = ["manifest", "cv"])]
    pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    truth: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for report.json and report.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of suite phantoms to write.
    #[arg(long, default_value_t = 12)]
    count: usize,
    /// Generate from this spec (JSON) instead of the suite.
    #[arg(long, conflicts_with = "count")]
    spec: Option<PathBuf>,
    /// Coarsen the grid by this factor along every axis.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    coarsen: u32,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Where annotations and predictions are stored (default: `session/` beside the manifest).
    #[arg(long)]
    session_dir: Option<PathBuf>,
}

fn cmd_geodesic(a: GeodesicArgs) -> anyhow::Result<()> {
    let ct = read_mhd(&a.ct).with_context(|| format!("reading {}", a.ct.display()))?;
    let target = match a.target {
        TargetArg::Right => Target::Right,
        TargetArg::Left => Target::Left,
    };
    let is_json = a.annotation.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let target = if is_json {
        // The annotation names its own target.
        let bytes = std::fs::read(&a.annotation).with_context(|| format!("reading {}", a.annotation.display()))?;
        geoforest::annotation::AnnotationDoc::from_json(&bytes)?.target
    } else {
        target
    };
    let seeds = load_seeds(&a.annotation, target, ct.geometry())?;
    let params = GeodesicParams {
        gamma: a.gamma,
        connectivity: if a.connectivity == "6" { Connectivity::Six } else { Connectivity::TwentySix },
        d_cap: a.d_cap,
    };
    let intensity = normalize_ct(&ct, a.window_lo, a.window_hi)?.with_kind(ChannelKind::CtHu);
    let d = geodesic_transform(&intensity, &seeds.linear_indices(ct.geometry()), &params)?;
    let out = if a.raw { d } else { normalize_distance(&d, params.d_cap)? };
    write_mhd(&out, &a.out)?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let config = a.config.load()?;
    let manifest = Manifest::load(&a.manifest)?;
    let cases = manifest.load_all()?;
    let forest = run_training(&cases, &config, a.seed)?;
    save_forest(&forest, &a.out)?;
    log::info!("wrote {} trees to {}", forest.trees.len(), a.out.display());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> anyhow::Result<()> {
    let config = a.config.load()?;
    let manifest = Manifest::load(&a.manifest)?;
    let forest = load_forest(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    for id in &a.cases {
        if manifest.get(id).is_none() {
            bail!("case `{id}` is not in the manifest");
        }
    }
    std::fs::create_dir_all(&a.out)?;
    for record in &manifest.cases {
        if !a.cases.is_empty() && !a.cases.contains(&record.case_id) {
            continue;
        }
        let case = manifest.load_case(record)?;
        let labels = run_prediction(&case, &forest, &config)?;
        write_label_mhd(&labels, a.out.join(format!("{}.mhd", record.case_id)))?;
        log::info!("predicted {}", record.case_id);
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let report = if let (Some(pred), Some(truth)) = (&a.pred, &a.truth) {
        let p = read_label_mhd(pred)?;
        let t = read_label_mhd(truth)?;
        let name = pred.file_stem().and_then(|s| s.to_str()).unwrap_or("case");
        DiceReport::from_rows(vec!["prediction".into()], score_case(name, "prediction", None, &p, &t)?)
    } else {
        let Some(manifest_path) = &a.manifest else {
            bail!("evaluate needs --manifest with --predictions or --cv, or --pred with --truth");
        };
        let manifest = Manifest::load(manifest_path)?;
        if let Some(dir) = &a.predictions {
            let mut rows = Vec::new();
            for record in &manifest.cases {
                let Some(truth_path) = &record.ground_truth_path else { continue };
                let truth = read_label_mhd(manifest.resolve(truth_path)).map_err(|e| e.in_case(&record.case_id))?;
                let pred_path = dir.join(format!("{}.mhd", record.case_id));
                let pred = read_label_mhd(&pred_path).map_err(|e| e.in_case(&record.case_id))?;
                rows.extend(score_case(&record.case_id, "prediction", None, &pred, &truth).map_err(|e| e.in_case(&record.case_id))?);
            }
            DiceReport::from_rows(vec!["prediction".into()], rows)
        } else if let Some(k) = a.cv {
            let config = a.config.load()?;
            let cases = manifest.load_all()?;
            compare_modes(&cases, &config.with_mode(Mode::BaselineCtOnly), &config.with_mode(Mode::WithGeodesic), k, a.seed)?
        } else {
            bail!("evaluate needs --predictions <dir> or --cv <k> with --manifest");
        }
    };
    report.write(&a.out)?;
    for s in &report.summaries {
        println!("{} {}: mean Dice {:.4}, median {:.4}", s.mode, s.class, s.mean, s.median);
    }
    for c in &report.comparisons {
        println!(
            "{}: {} wins, {} losses, {} ties for {} over {}",
            c.class, c.wins, c.losses, c.ties, c.candidate, c.reference
        );
    }
    Ok(())
}

fn cmd_phantom(a: PhantomArgs) -> anyhow::Result<()> {
    let specs = match &a.spec {
        Some(p) => vec![PhantomSpec::from_json(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?],
        None => {
            let max = SUITE_SEEDS.clone().count();
            if a.count == 0 || a.count > max {
                bail!("--count must be between 1 and {max}");
            }
            phantom_suite().into_iter().take(a.count).collect()
        }
    };
    let specs = specs
        .iter()
        .map(|s| s.coarsened(a.coarsen as usize))
        .collect::<geoforest::Result<Vec<_>>>()?;
    let manifest = write_suite(&a.out, &specs)?;
    println!("wrote {} cases to {}", manifest.cases.len(), a.out.join("manifest.json").display());
    Ok(())
}

fn cmd_serve(a: ServeArgs, threads: Option<usize>) -> anyhow::Result<()> {
    let config = a.config.load()?;
    let manifest = Manifest::load(&a.manifest)?;
    let forest = load_forest(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let state = Arc::new(ServiceState::new(manifest, config, forest, a.session_dir)?);
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = threads {
        rt.worker_threads(n);
    }
    let rt = rt.enable_all().build()?;
    rt.block_on(serve(state, (a.host, a.port).into()))?;
    Ok(())
}

fn thread_cap() -> anyhow::Result<Option<usize>> {
    match std::env::var("GEOFOREST_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => bail!("GEOFOREST_THREADS must be a positive integer, got `{v}`"),
        },
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = thread_cap()?;
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Geodesic(a) => cmd_geodesic(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Phantom(a) => cmd_phantom(a),
        Command::Serve(a) => cmd_serve(a, threads),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
