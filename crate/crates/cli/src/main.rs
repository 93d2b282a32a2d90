//! `viclfuse` command-line driver.
//!
//! Stages run in order: gen-data, train-backbone, train-pg, train-multi, then
//! eval, ablate, sweep and plot. Every command reads the config, writes under
//! `<out>/<stage>/`, refuses to overwrite without `--force`, and never trains
//! a missing prerequisite. Failures print one JSON error record on stderr.

mod plot;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use viclfuse::checkpoint::{save_backbone, save_multi, save_pg, Checkpoint, SaveMeta, Stage};
use viclfuse::config::RunConfig;
use viclfuse::eval::{read_summary, run_method, score_runs, sweep, write_reports, Knob, MetricReport};
use viclfuse::fusion::AblationVariant;
use viclfuse::nn::Params;
use viclfuse::pipeline::{fit_tokenizer, Method, SeedRun};
use viclfuse::taskgen::{generate, load_dataset, save_dataset, Dataset};

#[derive(Parser)]
#[command(name = "viclfuse", version, about = "Multi-prompt visual in-context learning at desk scale")]
struct Cli {
    /// JSON run config merged over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; also seeds data generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; overrides `paths.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset under `<data root>/data/<task>/`.
    GenData,
    /// Fit the tokenizer and pretrain the inpainting backbone.
    TrainBackbone,
    /// Train the prompt generator through the frozen backbone.
    TrainPg,
    /// Train the multi-branch model.
    TrainMulti {
        #[arg(long, default_value = "full")]
        variant: AblationVariant,
    },
    /// Score top-1, single-group condenser and a trained multi-branch model.
    Eval {
        #[arg(long, default_value = "full")]
        variant: AblationVariant,
    },
    /// Train and score ablation variants plus the baselines.
    Ablate {
        /// Run a single variant instead of all of them.
        #[arg(long)]
        variant: Option<AblationVariant>,
    },
    /// Train and score the full model across values of one hyperparameter.
    Sweep {
        #[arg(long)]
        knob: Knob,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Draw PNG charts from existing eval, ablate and sweep summaries.
    Plot,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::TrainBackbone => "train-backbone",
            Self::TrainPg => "train-pg",
            Self::TrainMulti { .. } => "train-multi",
            Self::Eval { .. } => "eval",
            Self::Ablate { .. } => "ablate",
            Self::Sweep { .. } => "sweep",
            Self::Plot => "plot",
        }
    }
}

/// Failure classes of the error record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    StageOrder,
    OutputExists,
    DataMismatch,
    Config,
    Checkpoint,
    Io,
    Runtime,
}

#[derive(Debug)]
struct CliError {
    kind: Kind,
    message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn fail(kind: Kind, message: impl Into<String>) -> anyhow::Error {
    CliError { kind, message: message.into() }.into()
}

fn kind_of(err: &anyhow::Error) -> Kind {
    if let Some(e) = err.downcast_ref::<CliError>() {
        return e.kind;
    }
    match err.downcast_ref::<viclfuse::Error>() {
        Some(viclfuse::Error::Config(_)) => Kind::Config,
        Some(viclfuse::Error::Checkpoint(_)) => Kind::Checkpoint,
        Some(viclfuse::Error::Io(_)) => Kind::Io,
        _ if err.downcast_ref::<std::io::Error>().is_some() => Kind::Io,
        _ => Kind::Runtime,
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    command: &'a str,
    kind: Kind,
    message: String,
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    force: bool,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::from_path(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(o) = &cli.out {
            cfg.paths.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(Self { out: cfg.paths.out_dir.clone(), cfg, force: cli.force })
    }

    fn stage_dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    /// Refuses to replace `path` unless `--force` was given.
    fn guard(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            return Err(fail(Kind::OutputExists, format!("{} exists; pass --force to overwrite", path.display())));
        }
        Ok(())
    }

    /// Creates `<out>/<stage>/` and records the resolved config there.
    fn prepare(&self, stage: &str) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.json"), self.cfg.to_json() + "\n")?;
        Ok(dir)
    }

    fn meta<'a>(&'a self, hash: &'a str, cb: &'a viclfuse::tokenizer::Codebook, trace: &'a [f64]) -> SaveMeta<'a> {
        SaveMeta { config_hash: hash, seed: self.cfg.seed, codebook: cb, loss_trace: trace }
    }

    fn dataset(&self) -> Result<Dataset> {
        let root = self.cfg.data_root();
        let manifest = root.join("data").join(self.cfg.task.task.as_str()).join("manifest.json");
        if !manifest.exists() {
            return Err(fail(Kind::StageOrder, format!("no dataset at {}; run gen-data first", manifest.display())));
        }
        let ds = load_dataset(&root, self.cfg.task.task)?;
        if ds.manifest.spec != self.cfg.task {
            return Err(fail(
                Kind::DataMismatch,
                "dataset on disk was generated from a different task spec or seed; rerun gen-data --force",
            ));
        }
        Ok(ds)
    }

    fn checkpoint(&self, stage: Stage, file: &str, producer: &str) -> Result<Checkpoint> {
        let path = self.stage_dir(stage.as_str()).join(file);
        if !path.exists() {
            return Err(fail(Kind::StageOrder, format!("missing {} checkpoint {}; run {producer} first", stage, path.display())));
        }
        let ck = Checkpoint::read(&path)?;
        ck.expect(stage, &self.cfg.hash())?;
        Ok(ck)
    }

    fn backbone_run(&self) -> Result<SeedRun> {
        let ck = self.checkpoint(Stage::Backbone, "backbone.viclf", "train-backbone")?;
        let ds = self.dataset()?;
        Ok(SeedRun::with_backbone(&self.cfg, ds, ck.codebook()?, ck.backbone()?, ck.header.loss_trace.clone())?)
    }

    fn pg_run(&self) -> Result<SeedRun> {
        let ck = self.checkpoint(Stage::Pg, "pg.viclf", "train-pg")?;
        let mut run = self.backbone_run()?;
        run.set_pg(ck.pg()?);
        Ok(run)
    }
}

fn multi_file(v: AblationVariant) -> String {
    format!("{v}.viclf")
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let root = ctx.cfg.data_root();
    let dir = root.join("data").join(ctx.cfg.task.task.as_str());
    ctx.guard(&dir.join("manifest.json"))?;
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    let ds = generate(&ctx.cfg.task)?;
    let dir = save_dataset(&ds, &root)?;
    log::info!("wrote {} support and {} query pairs to {}", ds.support.len(), ds.queries.len(), dir.display());
    Ok(())
}

fn train_backbone(ctx: &Ctx) -> Result<()> {
    let path = ctx.stage_dir("backbone").join("backbone.viclf");
    ctx.guard(&path)?;
    let ds = ctx.dataset()?;
    let cb = fit_tokenizer(&ctx.cfg, &ds)?;
    let canvases = viclfuse::pipeline::backbone_canvases(&ctx.cfg, &ds.support)?;
    let (w, trace) = viclfuse::backbone::train_backbone(
        &canvases,
        &cb,
        &ctx.cfg.backbone,
        &ctx.cfg.geometry,
        &ctx.cfg.backbone_sgd(),
    )?;
    ctx.prepare("backbone")?;
    let hash = ctx.cfg.hash();
    save_backbone(&path, &w, &ctx.cfg.geometry, &ctx.meta(&hash, &cb, &trace))?;
    log::info!("backbone loss {:?} -> {}", trace.first(), path.display());
    Ok(())
}

fn train_pg(ctx: &Ctx) -> Result<()> {
    let path = ctx.stage_dir("pg").join("pg.viclf");
    ctx.guard(&path)?;
    let mut run = ctx.backbone_run()?;
    run.train_pg()?;
    ctx.prepare("pg")?;
    let hash = ctx.cfg.hash();
    let pg = run.pg.as_ref().expect("trained above");
    save_pg(&path, pg, &ctx.cfg.geometry, &ctx.meta(&hash, &run.codebook, &run.pg_trace))?;
    log::info!("prompt generator -> {}", path.display());
    Ok(())
}

fn train_multi_cmd(ctx: &Ctx, variant: AblationVariant) -> Result<()> {
    let path = ctx.stage_dir("multi").join(multi_file(variant));
    ctx.guard(&path)?;
    let run = ctx.pg_run()?;
    let setup = run.setup(variant);
    let (w, trace) = run.train_multi(&setup, &run.multi_samples(run.grouping())?)?;
    ctx.prepare("multi")?;
    let hash = ctx.cfg.hash();
    save_multi(&path, &w, &setup, &ctx.cfg.geometry, &ctx.meta(&hash, &run.codebook, &trace))?;
    log::info!("multi-branch {variant} (weights {}) -> {}", &w.weights_hash()[..12], path.display());
    Ok(())
}

fn log_reports(reports: &[MetricReport]) {
    for r in reports {
        log::info!("{:<28} {:?} mean {:.4} std {:.4}", r.method, r.metric, r.mean, r.std);
    }
}

fn eval_cmd(ctx: &Ctx, variant: AblationVariant) -> Result<()> {
    let dir = ctx.stage_dir("eval");
    ctx.guard(&dir.join("summary.json"))?;
    let ck = ctx.checkpoint(Stage::Multi, &multi_file(variant), &format!("train-multi --variant {variant}"))?;
    let (weights, setup) = ck.multi()?;
    let runs = [ctx.pg_run()?];
    let mut reports = vec![run_method(Method::Top1, &runs)?, run_method(Method::CondenserSingle, &runs)?];
    reports.push(score_runs(&runs, Method::Multi(variant).name(), |r| {
        r.eval_multi(&weights, &setup, &r.query_canvases(r.grouping())?)
    })?);
    ctx.prepare("eval")?;
    write_reports(&reports, &dir)?;
    log_reports(&reports);
    Ok(())
}

fn ablate_cmd(ctx: &Ctx, variant: Option<AblationVariant>) -> Result<()> {
    let dir = ctx.stage_dir("ablate");
    ctx.guard(&dir.join("summary.json"))?;
    let runs = [ctx.pg_run()?];
    let methods: Vec<Method> = match variant {
        Some(v) => vec![Method::Multi(v)],
        None => [Method::Top1, Method::CondenserSingle, Method::NoFusion]
            .into_iter()
            .chain(AblationVariant::ALL.map(Method::Multi))
            .collect(),
    };
    let reports = methods
        .into_iter()
        .map(|m| {
            log::info!("ablation {m}");
            run_method(m, &runs)
        })
        .collect::<viclfuse::Result<Vec<_>>>()?;
    ctx.prepare("ablate")?;
    write_reports(&reports, &dir)?;
    log_reports(&reports);
    Ok(())
}

fn sweep_cmd(ctx: &Ctx, knob: Knob, values: &[usize]) -> Result<()> {
    let dir = ctx.stage_dir("sweep").join(knob.as_str());
    ctx.guard(&dir.join("summary.json"))?;
    let runs = [ctx.pg_run()?];
    let series = sweep(knob, values, &runs)?;
    ctx.prepare("sweep")?;
    write_reports(&series.reports, &dir)?;
    fs::write(dir.join("errors.json"), serde_json::to_string_pretty(&series.errors)? + "\n")?;
    for e in &series.errors {
        log::warn!("{knob}={} skipped: {}", e.value, e.error);
    }
    log_reports(&series.reports);
    Ok(())
}

fn plot_cmd(ctx: &Ctx) -> Result<()> {
    let dir = ctx.stage_dir("plot");
    let mut jobs: Vec<(PathBuf, PathBuf, bool)> = Vec::new();
    for stage in ["eval", "ablate"] {
        let s = ctx.stage_dir(stage).join("summary.json");
        if s.exists() {
            jobs.push((s, dir.join(format!("{stage}.png")), false));
        }
    }
    let sweeps = ctx.stage_dir("sweep");
    if sweeps.is_dir() {
        let mut knobs: Vec<PathBuf> = fs::read_dir(&sweeps)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        knobs.sort();
        for k in knobs {
            let s = k.join("summary.json");
            if s.exists() {
                let name = k.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                jobs.push((s, dir.join(format!("sweep_{name}.png")), true));
            }
        }
    }
    if jobs.is_empty() {
        return Err(fail(Kind::StageOrder, "no eval, ablate or sweep summaries to plot; run those commands first"));
    }
    for (_, png, _) in &jobs {
        ctx.guard(png)?;
    }
    fs::create_dir_all(&dir)?;
    for (summary, png, is_line) in jobs {
        let bars: Vec<plot::Bar> =
            read_summary(&summary)?.iter().map(|r| plot::Bar { mean: r.mean, std: r.std }).collect();
        if is_line {
            plot::line_chart(&bars, &png)?;
        } else {
            plot::bar_chart(&bars, &png)?;
        }
        log::info!("{} -> {}", summary.display(), png.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::GenData => gen_data(&ctx),
        Command::TrainBackbone => train_backbone(&ctx),
        Command::TrainPg => train_pg(&ctx),
        Command::TrainMulti { variant } => train_multi_cmd(&ctx, *variant),
        Command::Eval { variant } => eval_cmd(&ctx, *variant),
        Command::Ablate { variant } => ablate_cmd(&ctx, *variant),
        Command::Sweep { knob, values } => sweep_cmd(&ctx, *knob, values),
        Command::Plot => plot_cmd(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = ErrorRecord { command: cli.command.name(), kind: kind_of(&err), message: format!("{err:#}") };
            eprintln!("{}", serde_json::json!({ "error": record }));
            ExitCode::FAILURE
        }
    }
}
