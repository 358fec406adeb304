//! Metrics, experiment pipelines, ablation runners and report output.

use std::fmt::Write as _;
use std::path::Path;

use crate::baseline::ConcatBaseline;
use crate::cells::ChainKind;
use crate::config::{Config, PathSet};
use crate::data::{generate_synthetic, read_features, read_jsonl, DatasetSplit};
use crate::error::{MuseError, Result, StageExt};
use crate::model::{bilevel_search, evaluate, retrain_discrete, Muse, TrainOutcome};
use crate::paths::Dims;

/// Decision threshold on the final probability.
pub const THRESHOLD: f64 = 0.5;

/// Confusion counts and derived scores with one class taken as positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
        let precision = ratio(tp, fp);
        let recall = ratio(tp, fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassMetrics {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// Fake (label 1) as the positive class.
    pub fake: ClassMetrics,
    /// Real (label 0) as the positive class.
    pub real: ClassMetrics,
}

pub fn compute_metrics(predictions: &[f64], labels: &[u8]) -> Result<Metrics> {
    if predictions.is_empty() {
        return Err(MuseError::Data("metrics of an empty prediction set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(MuseError::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        if l > 1 {
            return Err(MuseError::Data(format!("label {l} is not 0 or 1")));
        }
        match (p >= THRESHOLD, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(Metrics {
        accuracy: (tp + tn) as f64 / predictions.len() as f64,
        fake: ClassMetrics::from_counts(tp, fp, fn_, tn),
        real: ClassMetrics::from_counts(tn, fn_, fp, tp),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub metrics: Metrics,
    pub genotype: String,
}

/// One table of results. CSV and text output exclude the wall-clock time,
/// so replaying a run reproduces them byte for byte.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub title: String,
    pub seed: u64,
    pub config_echo: String,
    pub rows: Vec<ReportRow>,
    pub wall_clock_secs: f64,
}

const CSV_HEADER: &str = "label,accuracy,fake_precision,fake_recall,fake_f1,real_precision,real_recall,real_f1,tp,fp,fn,tn";

impl ExperimentReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.title);
        let _ = writeln!(s, "# seed {}", self.seed);
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
                r.label,
                m.accuracy,
                m.fake.precision,
                m.fake.recall,
                m.fake.f1,
                m.real.precision,
                m.real.recall,
                m.real.f1,
                m.fake.tp,
                m.fake.fp,
                m.fake.fn_,
                m.fake.tn
            );
        }
        s
    }

    /// Aligned table, preceded by the config echo and followed by genotypes.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}  (seed {})", self.title, self.seed);
        if !self.config_echo.is_empty() {
            s.push_str("\n[config]\n");
            s.push_str(&self.config_echo);
        }
        s.push('\n');
        s.push_str(&table(&self.rows));
        for r in self.rows.iter().filter(|r| !r.genotype.is_empty()) {
            let _ = writeln!(s, "\n[genotype: {}]", r.label);
            s.push_str(&r.genotype);
        }
        s
    }

    /// Reads rows back from [`ExperimentReport::to_csv`] output. Genotypes
    /// and the config echo are not part of the CSV.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut title = String::new();
        let mut seed = 0;
        let mut rows = Vec::new();
        let mut header_seen = false;
        for (n, line) in text.lines().enumerate() {
            let bad = |m: &str| MuseError::Parse {
                offset: n as u64 + 1,
                message: format!("report line {}: {m}", n + 1),
            };
            if let Some(c) = line.strip_prefix("# ") {
                if let Some(v) = c.strip_prefix("seed ") {
                    seed = v.parse().map_err(|_| bad("bad seed"))?;
                } else {
                    title = c.to_string();
                }
                continue;
            }
            if line == CSV_HEADER {
                header_seen = true;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !header_seen {
                return Err(bad("row before header"));
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 12 {
                return Err(bad("expected 12 fields"));
            }
            let c = |i: usize| f[i].parse::<usize>().map_err(|_| bad("bad count"));
            let (tp, fp, fn_, tn) = (c(8)?, c(9)?, c(10)?, c(11)?);
            let total = tp + fp + fn_ + tn;
            if total == 0 {
                return Err(bad("empty confusion matrix"));
            }
            rows.push(ReportRow {
                label: f[0].to_string(),
                metrics: Metrics {
                    accuracy: (tp + tn) as f64 / total as f64,
                    fake: ClassMetrics::from_counts(tp, fp, fn_, tn),
                    real: ClassMetrics::from_counts(tn, fn_, fp, tp),
                },
                genotype: String::new(),
            });
        }
        if !header_seen {
            return Err(MuseError::Parse {
                offset: 0,
                message: "report has no CSV header".into(),
            });
        }
        Ok(ExperimentReport {
            title,
            seed,
            config_echo: String::new(),
            rows,
            wall_clock_secs: 0.0,
        })
    }
}

fn table(rows: &[ReportRow]) -> String {
    let head = [
        "Method", "Accuracy", "Fake P", "Fake R", "Fake F1", "Real P", "Real R", "Real F1",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let m = &r.metrics;
            let mut v = vec![r.label.clone()];
            v.extend(
                [
                    m.accuracy,
                    m.fake.precision,
                    m.fake.recall,
                    m.fake.f1,
                    m.real.precision,
                    m.real.recall,
                    m.real.f1,
                ]
                .iter()
                .map(|x| format!("{x:.3}")),
            );
            v
        })
        .collect();
    let widths: Vec<usize> = (0..head.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([head[c].len()]).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, x)| {
                if c == 0 {
                    format!("{x:<w$}", w = widths[c])
                } else {
                    format!("{x:>w$}", w = widths[c])
                }
            })
            .collect();
        format!("{}\n", parts.join("  ").trim_end())
    };
    s.push_str(&line(head.to_vec()));
    s.push_str(&format!("{}\n", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))));
    for r in &body {
        s.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    s
}

fn dims_of(cfg: &Config) -> Dims {
    Dims {
        k_t: cfg.data.k_t,
        d_t: cfg.data.d_t,
        k_v: cfg.data.k_v,
        d_v: cfg.data.d_v,
    }
}

/// Reads a `.musef` or `.jsonl` file, or generates synthetic data.
pub fn load_or_generate(cfg: &Config, path: Option<&Path>) -> Result<DatasetSplit> {
    match path {
        None => generate_synthetic(&cfg.data, cfg.seed),
        Some(p) if p.extension().is_some_and(|e| e == "jsonl") => read_jsonl(p),
        Some(p) => read_features(p),
    }
}

/// Test-set metrics of a trained model.
pub fn evaluate_model(model: &Muse, data: &DatasetSplit, batch_size: usize) -> Result<Metrics> {
    let p = evaluate(model, &data.test, batch_size)?;
    let labels: Vec<u8> = data.test.iter().map(|s| s.label).collect();
    compute_metrics(&p, &labels)
}

/// Everything produced by one search-then-retrain run.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub searched: Muse,
    pub discrete: Muse,
    pub search_log: TrainOutcome,
    pub retrain_log: TrainOutcome,
}

fn check_dims(data: &DatasetSplit) -> Result<Dims> {
    if data.test.is_empty() {
        return Err(MuseError::Data("test split is empty".into()));
    }
    Ok(data.dims)
}

/// Search, evaluate (MUSE), discretize and retrain, evaluate
/// (MUSE-discrete).
pub fn run_experiment(cfg: &Config, data: &DatasetSplit) -> Result<ExperimentOutcome> {
    let start = std::time::Instant::now();
    let dims = check_dims(data).stage("data")?;
    let mut model = Muse::new(&cfg.model, dims, cfg.seed).stage("build")?;
    let search_log = bilevel_search(&mut model, data, &cfg.train).stage("search")?;
    let searched = model.clone();
    let m1 = evaluate_model(&model, data, cfg.train.batch_size).stage("evaluate")?;
    let g1 = model.genotype();
    let retrain_log = retrain_discrete(&mut model, data, &cfg.train).stage("retrain")?;
    let m2 = evaluate_model(&model, data, cfg.train.batch_size).stage("evaluate")?;
    let report = ExperimentReport {
        title: "MUSE experiment".into(),
        seed: cfg.seed,
        config_echo: cfg.to_text(),
        rows: vec![
            ReportRow {
                label: "MUSE".into(),
                metrics: m1,
                genotype: g1,
            },
            ReportRow {
                label: "MUSE-discrete".into(),
                metrics: m2,
                genotype: model.genotype(),
            },
        ],
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(ExperimentOutcome {
        report,
        searched,
        discrete: model,
        search_log,
        retrain_log,
    })
}

/// Row label used by the operator ablation for `count` retained operators.
pub fn operator_row_label(count: usize, full: usize) -> String {
    if count == full {
        "All Operators".into()
    } else {
        format!("{count} Operators")
    }
}

/// Starting from a searched mixed model, repeatedly discretizes and
/// retrains a copy, then prunes the weakest candidate of every
/// transformation edge of `cfg.ablation_path`, until one remains.
pub fn run_operator_ablation(cfg: &Config, data: &DatasetSplit, searched: &Muse) -> Result<ExperimentReport> {
    let start = std::time::Instant::now();
    let kind = cfg.ablation_path;
    let mut current = searched.clone();
    let chain = current
        .chain(kind)
        .and_then(|c| c.mixed())
        .ok_or_else(|| MuseError::Config(format!("operator ablation needs a searched {} path", kind.as_str())))?;
    let full = chain
        .min_transform_ops()
        .ok_or_else(|| MuseError::Config(format!("{} path has no transformation edge", kind.as_str())))?;
    let mut rows = Vec::new();
    let mut count = full;
    loop {
        let mut retrained = current.clone();
        retrain_discrete(&mut retrained, data, &cfg.train).stage("retrain")?;
        let metrics = evaluate_model(&retrained, data, cfg.train.batch_size).stage("evaluate")?;
        rows.push(ReportRow {
            label: operator_row_label(count, full),
            metrics,
            genotype: current.chain(kind).expect("present").genotype(&current.store),
        });
        if count == 1 {
            break;
        }
        current.prune_lowest(kind).stage("prune")?;
        count -= 1;
    }
    Ok(ExperimentReport {
        title: format!("Operator ablation ({} path)", kind.as_str()),
        seed: cfg.seed,
        config_echo: cfg.to_text(),
        rows,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

pub const PATH_ABLATION_LABELS: [&str; 4] = ["MUSE", "w/o Linear", "w/o Sequence", "w/o Auxiliary"];

/// Path set for each path-ablation row.
pub fn path_ablation_variants() -> [PathSet; 4] {
    let all = PathSet::ALL;
    [
        all,
        PathSet { linear: false, ..all },
        PathSet { sequence: false, ..all },
        PathSet { auxiliary: false, ..all },
    ]
}

/// Full model and the three single-path removals under the same seed;
/// each row reports the retrained discrete model.
pub fn run_path_ablation(cfg: &Config, data: &DatasetSplit) -> Result<ExperimentReport> {
    let start = std::time::Instant::now();
    if cfg.model.paths != PathSet::ALL {
        return Err(MuseError::Config("path ablation starts from the full three-path model".into()));
    }
    let mut rows = Vec::new();
    for (label, paths) in PATH_ABLATION_LABELS.iter().zip(path_ablation_variants()) {
        let mut c = cfg.clone();
        c.model.paths = paths;
        let out = run_experiment(&c, data)?;
        let discrete = &out.report.rows[1];
        rows.push(ReportRow {
            label: label.to_string(),
            metrics: discrete.metrics,
            genotype: discrete.genotype.clone(),
        });
    }
    Ok(ExperimentReport {
        title: "Path ablation".into(),
        seed: cfg.seed,
        config_echo: cfg.to_text(),
        rows,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Trains the concat baseline for the same total epoch budget as a MUSE
/// run (search plus retraining) and reports its test metrics.
pub fn run_baseline(cfg: &Config, data: &DatasetSplit) -> Result<Metrics> {
    let dims = check_dims(data)?;
    let mut b = ConcatBaseline::new(dims, cfg.model.hidden, cfg.seed)?;
    b.train(data, &cfg.train, cfg.train.epochs + cfg.train.retrain_epochs)
        .stage("baseline")?;
    let p = b.predict(&data.test, cfg.train.batch_size)?;
    let labels: Vec<u8> = data.test.iter().map(|s| s.label).collect();
    compute_metrics(&p, &labels)
}

/// Synthetic dataset dims from the config, for callers without data.
pub fn config_dims(cfg: &Config) -> Dims {
    dims_of(cfg)
}

/// Chain kind for a CLI path name.
pub fn parse_chain_kind(s: &str) -> Result<ChainKind> {
    match s {
        "linear" => Ok(ChainKind::Linear),
        "sequence" => Ok(ChainKind::Sequence),
        _ => Err(MuseError::Config(format!("unknown path `{s}`"))),
    }
}
