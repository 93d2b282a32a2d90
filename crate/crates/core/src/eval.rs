//! Metrics, method comparison reports and hyperparameter sweeps.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::canvas::{Image, Label, LabelKind};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::{make_variant, AblationVariant, FusionRange, MultiSetup};
use crate::pipeline::{Grouping, Method, QueryScore, SeedRun};
use crate::taskgen::TaskKind;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-pixel mean channel `>= threshold` becomes foreground.
pub fn binarize(pred: &Image, threshold: f64) -> Label {
    let (h, w) = pred.dims();
    let px = pred.pixels();
    let out = Array3::from_shape_fn((h, w, 3), |(y, x, _)| {
        let m = (px[[y, x, 0]] + px[[y, x, 1]] + px[[y, x, 2]]) / 3.0;
        if m >= threshold {
            1.0
        } else {
            0.0
        }
    });
    Label::new(Image::from_raw(out), LabelKind::SegMask).expect("binary by construction")
}

/// Foreground IoU of two binary masks; both empty counts as a perfect match.
pub fn miou(pred: &Label, gt: &Label) -> Result<f64> {
    let (a, b) = (pred.image(), gt.image());
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", a.dims(), b.dims())));
    }
    let (h, w) = a.dims();
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            let p = a.pixels()[[y, x, 0]] >= 0.5;
            let g = b.pixels()[[y, x, 0]] >= 0.5;
            inter += (p && g) as usize;
            union += (p || g) as usize;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean squared error over all pixels and channels.
pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    let n = pred.pixels().len() as f64;
    Ok(pred.pixels().iter().zip(gt.pixels().iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Miou,
    Mse,
}

impl Metric {
    pub fn of(task: TaskKind) -> Self {
        match task {
            TaskKind::Seg | TaskKind::Det => Self::Miou,
            TaskKind::Color => Self::Mse,
        }
    }
}

/// Per-query scores of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScores {
    pub seed: u64,
    pub scores: Vec<QueryScore>,
}

impl SeedScores {
    pub fn mean(&self) -> f64 {
        crate::pipeline::mean(&self.scores)
    }
}

/// Sweep coordinate of a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub knob: Knob,
    pub value: usize,
}

/// Scores of one method over one or more seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub point: Option<SweepPoint>,
    pub metric: Metric,
    pub config_hash: String,
    pub seeds: Vec<SeedScores>,
    /// Arithmetic mean of every per-query score.
    pub mean: f64,
    pub seed_means: Vec<f64>,
    /// Population standard deviation of the seed means.
    pub std: f64,
    pub wall_clock_secs: f64,
}

/// One line of the per-query JSON-lines output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub point: Option<SweepPoint>,
    pub config_hash: String,
    pub seed: u64,
    pub query_id: u64,
    pub score: f64,
}

/// Report without per-query scores; the only place wall-clock time appears.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub point: Option<SweepPoint>,
    pub metric: Metric,
    pub config_hash: String,
    pub n_queries: usize,
    pub mean: f64,
    pub seed_means: Vec<f64>,
    pub std: f64,
    pub wall_clock_secs: f64,
}

impl MetricReport {
    pub fn new(method: String, metric: Metric, config_hash: String, seeds: Vec<SeedScores>, wall_clock_secs: f64) -> Result<Self> {
        let all: Vec<f64> = seeds.iter().flat_map(|s| s.scores.iter().map(|q| q.score)).collect();
        if all.is_empty() {
            return Err(Error::Empty("query scores"));
        }
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let seed_means: Vec<f64> = seeds.iter().map(SeedScores::mean).collect();
        let m = seed_means.iter().sum::<f64>() / seed_means.len() as f64;
        let std = (seed_means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / seed_means.len() as f64).sqrt();
        Ok(Self { method, point: None, metric, config_hash, seeds, mean, seed_means, std, wall_clock_secs })
    }

    pub fn n_queries(&self) -> usize {
        self.seeds.iter().map(|s| s.scores.len()).sum()
    }

    pub fn records(&self) -> Vec<QueryRecord> {
        self.seeds
            .iter()
            .flat_map(|s| {
                s.scores.iter().map(move |q| QueryRecord {
                    method: self.method.clone(),
                    point: self.point,
                    config_hash: self.config_hash.clone(),
                    seed: s.seed,
                    query_id: q.query_id,
                    score: q.score,
                })
            })
            .collect()
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            method: self.method.clone(),
            point: self.point,
            metric: self.metric,
            config_hash: self.config_hash.clone(),
            n_queries: self.n_queries(),
            mean: self.mean,
            seed_means: self.seed_means.clone(),
            std: self.std,
            wall_clock_secs: self.wall_clock_secs,
        }
    }
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::File::create(path)?)
}

/// One JSON object per query, in report order.
pub fn write_jsonl(reports: &[MetricReport], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(create(path)?);
    for r in reports {
        for rec in r.records() {
            serde_json::to_writer(&mut f, &rec)?;
            f.write_all(b"\n")?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn write_summary(reports: &[MetricReport], path: &Path) -> Result<()> {
    let s: Vec<ReportSummary> = reports.iter().map(MetricReport::summary).collect();
    fs::write(path, serde_json::to_string_pretty(&s)? + "\n").map_err(Error::from)
}

pub fn read_summary(path: &Path) -> Result<Vec<ReportSummary>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    method: &'a str,
    knob: Option<Knob>,
    value: Option<usize>,
    metric: Metric,
    n_seeds: usize,
    n_queries: usize,
    mean: f64,
    std: f64,
    config_hash: &'a str,
}

pub fn write_csv(reports: &[MetricReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in reports {
        w.serialize(CsvRow {
            method: &r.method,
            knob: r.point.map(|p| p.knob),
            value: r.point.map(|p| p.value),
            metric: r.metric,
            n_seeds: r.seeds.len(),
            n_queries: r.n_queries(),
            mean: r.mean,
            std: r.std,
            config_hash: &r.config_hash,
        })
        .map_err(|e| Error::InvalidValue(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `queries.jsonl`, `summary.json` and `table.csv` into `dir`.
pub fn write_reports(reports: &[MetricReport], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_jsonl(reports, &dir.join("queries.jsonl"))?;
    write_summary(reports, &dir.join("summary.json"))?;
    write_csv(reports, &dir.join("table.csv"))
}

/// Report of `method` built from `score` applied to every seed run. The
/// config hash is taken with the seed zeroed so reports over several seeds
/// share one hash.
pub fn score_runs(runs: &[SeedRun], method: String, mut score: impl FnMut(&SeedRun) -> Result<Vec<QueryScore>>) -> Result<MetricReport> {
    let first = runs.first().ok_or(Error::Empty("seed runs"))?;
    let start = Instant::now();
    let seeds = runs.iter().map(|r| Ok(SeedScores { seed: r.cfg.seed, scores: score(r)? })).collect::<Result<Vec<_>>>()?;
    let base = first.cfg.with_seed(0);
    MetricReport::new(method, Metric::of(first.cfg.task.task), base.hash(), seeds, start.elapsed().as_secs_f64())
}

/// Scores `method` on every prepared seed run.
pub fn run_method(method: Method, runs: &[SeedRun]) -> Result<MetricReport> {
    score_runs(runs, method.name(), |r| r.run_method(method, r.grouping()))
}

/// Runs every stage for each seed of `seeds` and scores all `methods`.
pub fn evaluate(cfg: &RunConfig, methods: &[Method], seeds: &[u64]) -> Result<Vec<MetricReport>> {
    let needs_pg = methods.iter().any(|m| *m != Method::Top1);
    let runs = seeds
        .iter()
        .map(|&s| {
            let mut run = SeedRun::through_backbone(&cfg.with_seed(s))?;
            if needs_pg {
                run.train_pg()?;
            }
            Ok(run)
        })
        .collect::<Result<Vec<_>>>()?;
    methods.iter().map(|&m| run_method(m, &runs)).collect()
}

/// Hyperparameter varied by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    KG1,
    KG2,
    FusionCenter,
    FusionWidth,
    GroupCount,
}

impl Knob {
    pub const ALL: [Knob; 5] = [Self::KG1, Self::KG2, Self::FusionCenter, Self::FusionWidth, Self::GroupCount];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::KG1 => "k_g1",
            Self::KG2 => "k_g2",
            Self::FusionCenter => "fusion_center",
            Self::FusionWidth => "fusion_width",
            Self::GroupCount => "group_count",
        }
    }
}

impl fmt::Display for Knob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Knob {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown knob `{s}`")))
    }
}

/// Grouping and fusion range of one sweep point, or why it is invalid.
pub fn sweep_arm(knob: Knob, value: usize, cfg: &RunConfig) -> Result<(Grouping, FusionRange)> {
    let r = &cfg.retrieval;
    let range = cfg.fusion_range();
    let (down, up) = (cfg.fusion.n_down, cfg.fusion.n_up);
    let mpgs = |k_g1: usize, k_g2: usize| {
        if k_g1 == 0 || k_g2 == 0 || k_g1 + k_g2 > r.k {
            Err(Error::GroupSize { k: r.k, k_g1, k_g2 })
        } else {
            Ok(Grouping::Mpgs { k_g1, k_g2 })
        }
    };
    let arm = match knob {
        Knob::KG1 => (mpgs(value, r.k_g2)?, range),
        Knob::KG2 => (mpgs(r.k_g1, value)?, range),
        Knob::FusionCenter => (mpgs(r.k_g1, r.k_g2)?, FusionRange::centered(value, up - down + 1)?),
        Knob::FusionWidth => (mpgs(r.k_g1, r.k_g2)?, FusionRange::centered((down + up) / 2, value)?),
        Knob::GroupCount => {
            if value == 0 || value > r.k {
                return Err(Error::InvalidValue(format!("group count {value} must lie in 1..={}", r.k)));
            }
            (Grouping::Even { n: value }, range)
        }
    };
    arm.1.check_depth(cfg.backbone.depth)?;
    Ok(arm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepError {
    pub value: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSeries {
    pub knob: Knob,
    pub values: Vec<usize>,
    /// One report per valid value, in order.
    pub reports: Vec<MetricReport>,
    pub errors: Vec<SweepError>,
}

/// Full multi-branch model at every value of `knob` on shared seed runs.
/// Invalid points are recorded and skipped.
pub fn sweep(knob: Knob, values: &[usize], runs: &[SeedRun]) -> Result<SweepSeries> {
    let cfg = &runs.first().ok_or(Error::Empty("seed runs"))?.cfg;
    let mut series = SweepSeries { knob, values: values.to_vec(), reports: Vec::new(), errors: Vec::new() };
    for &value in values {
        let point = sweep_arm(knob, value, cfg).and_then(|(grouping, range)| {
            let mut rep = score_runs(runs, Method::Multi(AblationVariant::Full).name(), |r| {
                let base = MultiSetup::full(range, r.cfg.fusion.heads);
                let setup = make_variant(AblationVariant::Full, &base, r.cfg.stage_seed("random_guidance"));
                r.run_setup(&setup, grouping)
            })?;
            rep.point = Some(SweepPoint { knob, value });
            Ok(rep)
        });
        match point {
            Ok(rep) => series.reports.push(rep),
            Err(e) => {
                log::warn!("sweep {knob}={value}: {e}");
                series.errors.push(SweepError { value, error: e.to_string() });
            }
        }
    }
    Ok(series)
}
