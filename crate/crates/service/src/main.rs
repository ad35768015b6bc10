use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use protodebug::datagen::{context_swap, generate};
use protodebug::dataset::{self, Dataset};
use protodebug::debugger::{run_session, SessionReport};
use protodebug::metrics::{evaluate, EvalResult};
use protodebug::model::ProtoPNet;
use protodebug::training::{train_stage1, train_stage2, TrainReport};
use protodebug_service::config::{ConfigError, RunConfig, RunManifest};
use protodebug_service::server::{
    self, AppState, ServerOptions, CHECKPOINT_FILE, REPORT_FILE, SESSION_FILE,
};
use thiserror::Error;

const TRAIN_REPORT_FILE: &str = "train_report.json";
const EVAL_FILE: &str = "eval.json";
const FEEDBACK_FILE: &str = "feedback.jsonl";

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("training failed: {0}")]
    Training(protodebug::Error),

    #[error(transparent)]
    Core(#[from] protodebug::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(protodebug::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "protodebug",
    version,
    about = "Train part-prototype networks and debug their concepts"
)]
struct Cli {
    /// Run configuration (TOML, or JSON when the file ends in .json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Datagen(DatagenArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Run debugging rounds on a trained model.
    Debug(DebugArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Summarise the outputs of a train or debug run.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct DatagenArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Generate without confounders.
    #[arg(long)]
    clean: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Seeds both the initialisation and the batch order.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AnnotatorKind {
    /// Simulated annotator that knows the object masks.
    Oracle,
    /// Serve the session over HTTP and wait for verdicts.
    Http,
}

#[derive(Args, Debug)]
struct DebugArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "debug")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = AnnotatorKind::Oracle)]
    annotator: AnnotatorKind,
    /// Overrides the port from the environment.
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    top_a: Option<usize>,
    #[arg(long)]
    max_rounds: Option<usize>,
    /// Forbid verdicts the oracle may give per class.
    #[arg(long)]
    forbid_budget: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Paste every test object onto the background of another class.
    #[arg(long)]
    swap_context: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the full result as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn load_data(dir: &Path) -> CliResult<Dataset> {
    Ok(dataset::load(dir)?)
}

fn check_model(model: &ProtoPNet, data: &Dataset) -> CliResult {
    let s = &data.spec;
    if model.num_classes() != s.num_classes
        || model.config.input_shape != [s.height, s.width, s.channels]
    {
        return Err(ConfigError::Invalid("checkpoint does not match the dataset".into()).into());
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    std::fs::write(
        path,
        serde_json::to_vec_pretty(value).map_err(protodebug::Error::from)?,
    )?;
    Ok(())
}

fn datagen(mut cfg: RunConfig, args: DatagenArgs) -> CliResult {
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
    }
    if args.clean {
        cfg.data = cfg.data.clean();
    }
    cfg.data
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let mut manifest = RunManifest::start("datagen", &cfg);
    let data = generate(&cfg.data)?;
    dataset::save(&data, &args.out)?;
    manifest.output(&args.out.join("manifest.json"))?;
    manifest.finish(&args.out)?;
    println!(
        "{} train and {} test images in {}",
        data.train.len(),
        data.test.len(),
        args.out.display()
    );
    Ok(())
}

fn train(mut cfg: RunConfig, args: TrainArgs) -> CliResult {
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    let data = load_data(&args.data)?;
    cfg.validate(&data.spec)?;
    let mut manifest = RunManifest::start("train", &cfg);
    manifest.input(&args.data.join("manifest.json"))?;
    std::fs::create_dir_all(&args.out)?;

    let mut model = ProtoPNet::new(cfg.model.clone(), cfg.train.seed)?;
    let report: TrainReport = train_stage1(&mut model, &data.train, &data.test, &cfg.train)
        .map_err(CliError::Training)?;
    if let Some(s2) = &cfg.stage2 {
        train_stage2(&mut model, &data.train, s2).map_err(CliError::Training)?;
    }
    let eval = evaluate(&model, &data.test)?;

    let ckpt = args.out.join(CHECKPOINT_FILE);
    model.save(&ckpt)?;
    write_json(&args.out.join(TRAIN_REPORT_FILE), &report)?;
    write_json(&args.out.join(EVAL_FILE), &eval)?;
    for name in [CHECKPOINT_FILE, TRAIN_REPORT_FILE, EVAL_FILE] {
        manifest.output(&args.out.join(name))?;
    }
    manifest.finish(&args.out)?;
    println!(
        "{} epochs in {:.1}s, final loss {:.4}, test macro F1 {:.3}",
        report.epochs.len(),
        report.wall_time_secs,
        report.final_loss().unwrap_or(f64::NAN),
        eval.macro_f1
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn debug(mut cfg: RunConfig, args: DebugArgs) -> CliResult {
    if let Some(a) = args.top_a {
        cfg.session.top_a = a;
    }
    if let Some(r) = args.max_rounds {
        cfg.session.max_rounds = r;
    }
    if let Some(b) = args.forbid_budget {
        cfg.oracle.max_forbid_per_class = Some(b);
    }
    let data = load_data(&args.data)?;
    let model = ProtoPNet::load(&args.checkpoint)?;
    check_model(&model, &data)?;
    cfg.model = model.config.clone();
    cfg.validate(&data.spec)?;
    let mut manifest = RunManifest::start("debug", &cfg);
    manifest.input(&args.data.join("manifest.json"))?;
    manifest.input(&args.checkpoint)?;
    std::fs::create_dir_all(&args.out)?;
    let feedback = args.out.join(FEEDBACK_FILE);

    let report = match args.annotator {
        AnnotatorKind::Oracle => {
            let mut model = model;
            let mut oracle = cfg.oracle.clone();
            let (session, report) =
                run_session(&mut model, &data, cfg.session.clone(), &mut oracle)
                    .map_err(CliError::Training)?;
            model.save(args.out.join(CHECKPOINT_FILE))?;
            write_json(&args.out.join(REPORT_FILE), &report)?;
            std::fs::write(args.out.join(SESSION_FILE), session.to_json()?)?;
            session.write_log(&feedback)?;
            report
        }
        AnnotatorKind::Http => {
            let port = match args.port {
                Some(p) => p,
                None => server::port_from_env().map_err(ConfigError::Invalid)?,
            };
            // A fresh session starts a fresh log.
            if feedback.exists() {
                std::fs::remove_file(&feedback)?;
            }
            let options = ServerOptions {
                feedback_log: Some(feedback.clone()),
                out_dir: Some(args.out.clone()),
            };
            let state = AppState::new(model, data, cfg.session.clone(), options)?;
            let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, port));
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(server::serve(state.clone(), addr, async {
                let _ = tokio::signal::ctrl_c().await;
            }))?;
            state.report()?
        }
    };
    let mut outputs = vec![CHECKPOINT_FILE, REPORT_FILE, SESSION_FILE];
    if feedback.exists() {
        outputs.push(FEEDBACK_FILE);
    }
    for name in outputs {
        manifest.output(&args.out.join(name))?;
    }
    manifest.finish(&args.out)?;
    print_rounds(&report);
    Ok(())
}

fn eval(args: EvalArgs) -> CliResult {
    let data = load_data(&args.data)?;
    let model = ProtoPNet::load(&args.checkpoint)?;
    check_model(&model, &data)?;
    let test = if args.swap_context {
        context_swap(&data.test, args.seed)?
    } else {
        data.test.clone()
    };
    let result = evaluate(&model, &test)?;
    print_eval(
        if args.swap_context {
            "context-swapped test"
        } else {
            "test"
        },
        &result,
    );
    if let Some(out) = &args.out {
        write_json(out, &result)?;
    }
    Ok(())
}

fn report(args: ReportArgs) -> CliResult {
    let session = args.run.join(REPORT_FILE);
    let train = args.run.join(TRAIN_REPORT_FILE);
    let mut found = false;
    if train.exists() {
        let r: TrainReport =
            serde_json::from_slice(&std::fs::read(&train)?).map_err(protodebug::Error::from)?;
        println!("epoch  loss      train F1  test F1");
        for e in &r.epochs {
            let test = e
                .test_macro_f1
                .map_or_else(|| "-".to_string(), |f| format!("{f:.3}"));
            println!(
                "{:<6} {:<9.4} {:<9.3} {test}",
                e.epoch, e.loss.total, e.train_macro_f1
            );
        }
        found = true;
    }
    if session.exists() {
        let r: SessionReport =
            serde_json::from_slice(&std::fs::read(&session)?).map_err(protodebug::Error::from)?;
        print_rounds(&r);
        found = true;
    }
    let eval = args.run.join(EVAL_FILE);
    if eval.exists() {
        let r: EvalResult =
            serde_json::from_slice(&std::fs::read(&eval)?).map_err(protodebug::Error::from)?;
        print_eval("test", &r);
        found = true;
    }
    if !found {
        return Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no reports in {}", args.run.display()),
        )
        .into());
    }
    Ok(())
}

fn print_eval(split: &str, r: &EvalResult) {
    let ap = r
        .mean_ap
        .map_or_else(|| "-".to_string(), |a| format!("{a:.3}"));
    println!(
        "{split}: macro F1 {:.3}, micro F1 {:.3}, mean AP {ap}",
        r.macro_f1, r.micro_f1
    );
}

fn print_rounds(r: &SessionReport) {
    println!("round    forbid  keep  skip  forget loss          test macro F1");
    println!("initial  {:>38}{:.3}", "", r.initial_eval.macro_f1);
    for round in &r.rounds {
        let forget = match (round.forget_before, round.forget_after) {
            (Some(b), Some(a)) => format!("{b:.4} -> {a:.4}"),
            _ => "-".to_string(),
        };
        let f1 = round
            .eval_after
            .as_ref()
            .map_or_else(|| "-".to_string(), |e| format!("{:.3}", e.macro_f1));
        println!(
            "{:<8} {:>6} {:>5} {:>5}  {forget:<20} {f1}",
            round.round, round.forbid, round.keep, round.skip
        );
    }
    let state = if r.converged {
        "converged"
    } else {
        "stopped at the round limit"
    };
    println!("{state}; final test macro F1 {:.3}", r.final_eval.macro_f1);
}

fn run(cli: Cli) -> CliResult {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Datagen(a) => datagen(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Debug(a) => debug(cfg, a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
