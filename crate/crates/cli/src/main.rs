mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use graphalign::align::{align_loop, evaluate_classification, Weighting};
use graphalign::graphdata::{load_directory, DomainDataset, SplitKind};
use graphalign::pretrain::{evaluate_retrieval, pretrain_loop};
use graphalign::{gradcheck, persist, seeding, synthgen, Error};
use serde_json::json;

use config::{resolve_path, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "graphalign",
    version,
    about = "Graph encoder pretraining and curriculum alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic benchmark suite.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stage I: contrastive pretraining of the encoder.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch loss CSV; defaults to `<out>.losses.csv`.
        #[arg(long)]
        losses: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        hidden_dim: Option<usize>,
    },
    /// Stage II: projector tuning against the frozen head.
    Align {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_enum)]
        weighting: Option<WeightingArg>,
    },
    /// Score checkpoints on held-out data.
    Eval {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        projector: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = 100)]
        pool: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TRIALS)]
        trials: usize,
    },
    /// Split a metrics CSV into per-domain trajectories.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Retrieval,
    Classification,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WeightingArg {
    Curriculum,
    Uniform,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

enum Failure {
    Usage(&'static str, String),
    Run(Error),
    Gradcheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome = Result<(), Failure>;

/// Writes to stdout, treating a closed pipe as nothing to do.
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn echo(command: &str, resolved: serde_json::Value) {
    emit(&json!({ "command": command, "config": resolved }).to_string());
}

fn report_line(v: serde_json::Value) {
    emit(&v.to_string());
}

fn load_data(dir: &Path) -> Result<Vec<DomainDataset>, Error> {
    let datasets = load_directory(dir)?;
    for ds in &datasets {
        if let Some((instance, v)) = ds.violations().into_iter().next() {
            return Err(Error::Validation {
                instance,
                field: v.field.to_string(),
                message: format!("domain `{}`: {}", ds.domain, v.message),
            });
        }
    }
    Ok(datasets)
}

fn feature_width(datasets: &[DomainDataset]) -> Result<usize, Error> {
    datasets
        .iter()
        .find_map(DomainDataset::feature_dim)
        .ok_or_else(|| Error::EmptyData("no instances with node features".into()))
}

fn domain_names(datasets: &[DomainDataset]) -> Vec<String> {
    datasets.iter().map(|d| d.domain.clone()).collect()
}

fn synth(out: &Path, seed: u64) -> Outcome {
    echo("synth", json!({ "out": out, "seed": seed }));
    for (graphs, emb) in synthgen::generate_benchmark_suite(out, seed)? {
        report_line(json!({ "graphs": graphs, "embeddings": emb }));
    }
    Ok(())
}

struct PretrainArgs {
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    losses: Option<PathBuf>,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    temperature: Option<f64>,
    layers: Option<usize>,
    hidden_dim: Option<usize>,
}

fn pretrain(a: PretrainArgs) -> Outcome {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let data = resolve_path(a.data, &mut cfg.paths.data, "data").map_err(|m| Failure::Usage("pretrain", m))?;
    let out = resolve_path(a.out, &mut cfg.paths.out, "out").map_err(|m| Failure::Usage("pretrain", m))?;
    let losses = a.losses.or(cfg.paths.losses.take()).unwrap_or_else(|| {
        let mut s = out.clone().into_os_string();
        s.push(".losses.csv");
        PathBuf::from(s)
    });
    cfg.paths.losses = Some(losses.clone());
    let p = &mut cfg.pretrain;
    p.seed = a.seed.unwrap_or(p.seed);
    p.epochs = a.epochs.unwrap_or(p.epochs);
    p.batch_size = a.batch_size.unwrap_or(p.batch_size);
    p.learning_rate = a.lr.unwrap_or(p.learning_rate);
    p.temperature = a.temperature.unwrap_or(p.temperature);
    cfg.encoder.layers = a.layers.unwrap_or(cfg.encoder.layers);
    cfg.encoder.hidden_dim = a.hidden_dim.unwrap_or(cfg.encoder.hidden_dim);
    cfg.validate()?;

    let datasets = load_data(&data)?;
    let dims = cfg.encoder.dims(feature_width(&datasets)?)?;
    cfg.encoder.input_dim = Some(dims.input_dim);
    echo("pretrain", serde_json::to_value(&cfg).expect("config serializes"));

    let outcome = pretrain_loop(&cfg.pretrain, dims, &datasets)?;
    let text_dim = datasets[0].text_dim();
    let ckpt = persist::encoder_checkpoint(
        &outcome.model,
        text_dim,
        domain_names(&datasets),
        serde_json::to_value(&cfg).expect("config serializes"),
        cfg.pretrain.seed,
        outcome.losses.len() as u64,
    );
    persist::save_checkpoint(&ckpt, &out)?;
    persist::export_epoch_losses(&outcome.losses, &losses)?;
    let first = outcome.losses.first().map(|l| l.mean_loss);
    let last = outcome.losses.last().map(|l| l.mean_loss);
    report_line(json!({
        "checkpoint": out,
        "losses": losses,
        "epochs": outcome.losses.len(),
        "first_epoch_loss": first,
        "final_epoch_loss": last,
        "encoder_sha256": persist::hex(&persist::param_digest(outcome.model.encoder.params())),
    }));
    Ok(())
}

struct AlignArgs {
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    encoder: Option<PathBuf>,
    out: Option<PathBuf>,
    metrics: Option<PathBuf>,
    seed: Option<u64>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    weighting: Option<WeightingArg>,
}

fn align(a: AlignArgs) -> Outcome {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let encoder_path =
        resolve_path(a.encoder, &mut cfg.paths.encoder, "encoder").map_err(|m| Failure::Usage("align", m))?;
    let data = resolve_path(a.data, &mut cfg.paths.data, "data").map_err(|m| Failure::Usage("align", m))?;
    let out = resolve_path(a.out, &mut cfg.paths.out, "out").map_err(|m| Failure::Usage("align", m))?;
    let metrics = resolve_path(a.metrics, &mut cfg.paths.metrics, "metrics").map_err(|m| Failure::Usage("align", m))?;
    let al = &mut cfg.align;
    al.seed = a.seed.unwrap_or(al.seed);
    al.steps = a.steps.or(al.steps);
    al.batch_size = a.batch_size.unwrap_or(al.batch_size);
    al.learning_rate = a.lr.unwrap_or(al.learning_rate);
    if let Some(w) = a.weighting {
        al.weighting = match w {
            WeightingArg::Curriculum => Weighting::Curriculum,
            WeightingArg::Uniform => Weighting::Uniform,
        };
    }
    cfg.validate()?;

    let (model, extra) = persist::model_from_checkpoint(&persist::load_checkpoint(&encoder_path)?)?;
    cfg.encoder.layers = extra.dims.layers;
    cfg.encoder.hidden_dim = extra.dims.hidden_dim;
    cfg.encoder.input_dim = Some(extra.dims.input_dim);
    echo("align", serde_json::to_value(&cfg).expect("config serializes"));

    let datasets = load_data(&data)?;
    let before = persist::param_digest(model.encoder.params());
    let outcome = align_loop(&cfg.align, &datasets, &model.encoder)?;
    let ckpt = persist::projector_checkpoint(
        &outcome,
        serde_json::to_value(&cfg).expect("config serializes"),
        cfg.align.seed,
    )?;
    persist::save_checkpoint(&ckpt, &out)?;
    persist::export_metrics(&outcome.metrics, &metrics)?;
    report_line(json!({
        "checkpoint": out,
        "metrics": metrics,
        "steps": outcome.steps,
        "encoder_sha256": persist::hex(&before),
        "head_sha256": persist::hex(&persist::param_digest(&outcome.head.to_params())),
    }));
    Ok(())
}

struct EvalArgs {
    encoder: PathBuf,
    projector: Option<PathBuf>,
    data: PathBuf,
    mode: Mode,
    pool: usize,
    seed: u64,
    split: SplitArg,
}

fn eval(a: EvalArgs) -> Outcome {
    let split = match a.split {
        SplitArg::Val => SplitKind::Val,
        SplitArg::Test => SplitKind::Test,
    };
    if matches!(a.mode, Mode::Classification) && a.projector.is_none() {
        return Err(Failure::Usage(
            "eval",
            "classification mode needs '--projector <PATH>'".into(),
        ));
    }
    echo(
        "eval",
        json!({
            "encoder": a.encoder,
            "projector": a.projector,
            "data": a.data,
            "mode": format!("{:?}", a.mode).to_lowercase(),
            "pool": a.pool,
            "seed": a.seed,
            "split": format!("{:?}", a.split).to_lowercase(),
        }),
    );
    let (model, _) = persist::model_from_checkpoint(&persist::load_checkpoint(&a.encoder)?)?;
    let datasets = load_data(&a.data)?;
    match a.mode {
        Mode::Retrieval => {
            for ds in &datasets {
                let pool = a.pool.min(ds.split.held_out().len());
                let mut rng = seeding::stream(a.seed, &format!("eval/{}", ds.domain));
                let s = evaluate_retrieval(&model, ds, pool, &mut rng)?;
                report_line(json!({
                    "domain": ds.domain,
                    "pool_size": s.pool_size,
                    "recall_at_1": s.recall_at_1,
                    "recall_at_5": s.recall_at_5,
                }));
            }
        }
        Mode::Classification => {
            let path = a.projector.expect("checked above");
            let loaded = persist::projector_from_checkpoint(&persist::load_checkpoint(&path)?)?;
            for ds in &datasets {
                let s = evaluate_classification(&model.encoder, &loaded.projector, &loaded.head, ds, split)?;
                report_line(json!({
                    "domain": ds.domain,
                    "count": s.count,
                    "accuracy": s.accuracy,
                    "macro_f1": s.macro_f1,
                }));
            }
        }
    }
    Ok(())
}

fn run_gradcheck(seed: u64, trials: usize) -> Outcome {
    echo("gradcheck", json!({ "seed": seed, "trials": trials }));
    let report = gradcheck::run_gradcheck(seed, trials)?;
    emit(report.table().trim_end());
    emit(&format!(
        "max relative error {:.3e} (tolerance {:.0e}): {}",
        report.max_error(),
        report.tolerance,
        if report.passed() { "ok" } else { "FAILED" }
    ));
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Gradcheck)
    }
}

fn sanitize(domain: &str) -> String {
    domain
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn report(metrics: &Path, out: &Path) -> Outcome {
    echo("report", json!({ "metrics": metrics, "out": out }));
    let rows = persist::read_metrics(metrics)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let mut by_domain: BTreeMap<&str, Vec<&graphalign::align::MetricRow>> = BTreeMap::new();
    for r in &rows {
        by_domain.entry(&r.domain).or_default().push(r);
    }
    for (domain, rows) in &by_domain {
        let path = out.join(format!("{}.trajectory.csv", sanitize(domain)));
        persist::write_csv(
            &path,
            &["step", "loss", "grad_norm", "smoothed", "weight"],
            rows.iter().map(|r| {
                vec![
                    r.step.to_string(),
                    persist::format_f64(r.loss),
                    persist::format_f64(r.grad_norm),
                    persist::format_f64(r.smoothed),
                    persist::format_f64(r.weight),
                ]
            }),
        )?;
        report_line(json!({ "domain": domain, "rows": rows.len(), "trajectory": path }));
    }
    persist::write_csv(
        &out.join("summary.csv"),
        &["domain", "rows", "mean_weight", "mean_loss", "final_loss"],
        by_domain.iter().map(|(domain, rows)| {
            let n = rows.len() as f64;
            vec![
                domain.to_string(),
                rows.len().to_string(),
                persist::format_f64(rows.iter().map(|r| r.weight).sum::<f64>() / n),
                persist::format_f64(rows.iter().map(|r| r.loss).sum::<f64>() / n),
                persist::format_f64(rows.last().map_or(f64::NAN, |r| r.loss)),
            ]
        }),
    )?;
    Ok(())
}

fn configure_threads() -> Outcome {
    let Ok(raw) = std::env::var("UGLM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage("", format!("UGLM_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage("", format!("cannot size the thread pool: {e}")))
}

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Synth { out, seed } => synth(&out, seed),
        Command::Pretrain {
            config,
            data,
            out,
            losses,
            seed,
            epochs,
            batch_size,
            lr,
            temperature,
            layers,
            hidden_dim,
        } => pretrain(PretrainArgs {
            config,
            data,
            out,
            losses,
            seed,
            epochs,
            batch_size,
            lr,
            temperature,
            layers,
            hidden_dim,
        }),
        Command::Align {
            config,
            data,
            encoder,
            out,
            metrics,
            seed,
            steps,
            batch_size,
            lr,
            weighting,
        } => align(AlignArgs {
            config,
            data,
            encoder,
            out,
            metrics,
            seed,
            steps,
            batch_size,
            lr,
            weighting,
        }),
        Command::Eval {
            encoder,
            projector,
            data,
            mode,
            pool,
            seed,
            split,
        } => eval(EvalArgs {
            encoder,
            projector,
            data,
            mode,
            pool,
            seed,
            split,
        }),
        Command::Gradcheck { seed, trials } => run_gradcheck(seed, trials),
        Command::Report { metrics, out } => report(&metrics, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|_| dispatch(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(sub, msg)) => {
            let mut cmd = Cli::command();
            cmd.build();
            let usage = match cmd.find_subcommand_mut(sub) {
                Some(s) => s.render_usage(),
                None => cmd.render_usage(),
            };
            eprintln!("error: {msg}\n\n{usage}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
        Err(Failure::Gradcheck) => {
            eprintln!("error: gradient check exceeded tolerance");
            ExitCode::from(3)
        }
    }
}
