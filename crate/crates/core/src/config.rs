//! Experiment configuration as `key = value` text.
//!
//! Blank lines and `#` comments are ignored; unknown keys are rejected.
//! [`Config::to_text`] writes every key in a fixed order and is what reports
//! and checkpoints echo. Lists are comma separated.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `seed` | 7 | master seed (overridden by `MUSE_SEED`) |
//! | `data.n` | 1000 | synthetic sample count |
//! | `data.k_t`, `data.k_v` | 4, 4 | rows per text / image matrix |
//! | `data.d_t`, `data.d_v` | 12, 12 | text / image feature width |
//! | `data.rule` | sum | planted rule: `sum`, `max`, `interaction` |
//! | `data.noise` | 0.1 | feature noise standard deviation |
//! | `data.row_spread` | 0.5 | per-row deviation around the sample's global vector |
//! | `data.missing_text_rate`, `data.missing_image_rate` | 0, 0 | modality drop rates |
//! | `data.partial` | false | drop exactly one modality per sample after generation |
//! | `data.test_fraction` | 0.2 | share of samples held out for testing |
//! | `data.valid_fraction` | 0.5 | share of the remainder used for architecture updates |
//! | `model.hidden` | 8 | common hidden width |
//! | `model.linear_depth`, `model.sequence_depth` | 3, 3 | cells per dynamic path |
//! | `model.topology` | chain | `chain` or `dag` |
//! | `model.paths` | linear,sequence,auxiliary | enabled paths |
//! | `model.combiner` | sigmoid | `sigmoid` (outer sigmoid) or `softmax` (normalised path weights) |
//! | `static_path.variant` | siamese | `siamese` or `cluster_reference` |
//! | `static_path.k` | 2 | clusters per batch |
//! | `static_path.kmeans_iters` | 20 | Lloyd iteration cap |
//! | `search.fusion_ops`, `search.linear_ops`, `search.sequence_ops` | full registries | candidate restriction |
//! | `train.epochs` | 20 | search epochs |
//! | `train.batch_size` | 32 | mini-batch size |
//! | `train.optimizer` | adam | `adam` or `sgd` |
//! | `train.lr`, `train.weight_decay` | 0.01, 0 | weight optimiser |
//! | `train.arch_lr`, `train.arch_weight_decay` | 0.003, 0.001 | logit optimiser; `arch_lr = 0` freezes logits |
//! | `retrain.epochs` | 20 | epochs for discrete retraining |
//! | `retrain.warm_start` | true | keep searched weights when retraining |
//! | `ablation.path` | linear | chain pruned by the operator ablation |

use std::fmt::Write as _;

use crate::cells::{ChainKind, Topology};
use crate::error::{MuseError, Result};
use crate::searchspace::OpKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    SumSeparable,
    MaxSeparable,
    Interaction,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::SumSeparable => "sum",
            Rule::MaxSeparable => "max",
            Rule::Interaction => "interaction",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" | "sum-separable" => Ok(Rule::SumSeparable),
            "max" | "max-separable" => Ok(Rule::MaxSeparable),
            "interaction" => Ok(Rule::Interaction),
            _ => Err(MuseError::Config(format!("unknown planted rule `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StaticVariant {
    Siamese,
    ClusterReference,
}

impl StaticVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            StaticVariant::Siamese => "siamese",
            StaticVariant::ClusterReference => "cluster_reference",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "siamese" => Ok(StaticVariant::Siamese),
            "cluster_reference" => Ok(StaticVariant::ClusterReference),
            _ => Err(MuseError::Config(format!("unknown static_path.variant `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combiner {
    /// `sigmoid(beta*s1 + gamma*s2 + delta*s3)`.
    OuterSigmoid,
    /// `softmax(beta, gamma, delta) . (s1, s2, s3)`.
    Softmax,
}

impl Combiner {
    pub fn as_str(self) -> &'static str {
        match self {
            Combiner::OuterSigmoid => "sigmoid",
            Combiner::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Combiner::OuterSigmoid),
            "softmax" => Ok(Combiner::Softmax),
            _ => Err(MuseError::Config(format!("unknown model.combiner `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathSet {
    pub linear: bool,
    pub sequence: bool,
    pub auxiliary: bool,
}

impl PathSet {
    pub const ALL: PathSet = PathSet {
        linear: true,
        sequence: true,
        auxiliary: true,
    };

    pub fn parse(s: &str) -> Result<Self> {
        let mut p = PathSet {
            linear: false,
            sequence: false,
            auxiliary: false,
        };
        for part in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            match part {
                "linear" => p.linear = true,
                "sequence" => p.sequence = true,
                "auxiliary" | "static" => p.auxiliary = true,
                other => return Err(MuseError::Config(format!("unknown path `{other}`"))),
            }
        }
        if !p.linear && !p.sequence && !p.auxiliary {
            return Err(MuseError::Config("model.paths enables no path".into()));
        }
        Ok(p)
    }

    pub fn to_text(self) -> String {
        let mut v = Vec::new();
        if self.linear {
            v.push("linear");
        }
        if self.sequence {
            v.push("sequence");
        }
        if self.auxiliary {
            v.push("auxiliary");
        }
        v.join(",")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n: usize,
    pub k_t: usize,
    pub k_v: usize,
    pub d_t: usize,
    pub d_v: usize,
    pub rule: Rule,
    pub noise: f64,
    pub row_spread: f64,
    pub missing_text_rate: f64,
    pub missing_image_rate: f64,
    pub partial: bool,
    pub test_fraction: f64,
    pub valid_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub linear_depth: usize,
    pub sequence_depth: usize,
    pub topology: Topology,
    pub paths: PathSet,
    pub combiner: Combiner,
    pub static_variant: StaticVariant,
    pub cluster_k: usize,
    pub kmeans_iters: usize,
    pub fusion_ops: Vec<String>,
    pub linear_ops: Vec<String>,
    pub sequence_ops: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub arch_lr: f64,
    pub arch_weight_decay: f64,
    pub retrain_epochs: usize,
    pub retrain_warm_start: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation_path: ChainKind,
}

fn registry(kind: OpKind) -> Vec<String> {
    kind.registry().iter().map(|s| s.to_string()).collect()
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            data: DataConfig {
                n: 1000,
                k_t: 4,
                k_v: 4,
                d_t: 12,
                d_v: 12,
                rule: Rule::SumSeparable,
                noise: 0.1,
                row_spread: 0.5,
                missing_text_rate: 0.0,
                missing_image_rate: 0.0,
                partial: false,
                test_fraction: 0.2,
                valid_fraction: 0.5,
            },
            model: ModelConfig {
                hidden: 8,
                linear_depth: 3,
                sequence_depth: 3,
                topology: Topology::Chain,
                paths: PathSet::ALL,
                combiner: Combiner::OuterSigmoid,
                static_variant: StaticVariant::Siamese,
                cluster_k: 2,
                kmeans_iters: 20,
                fusion_ops: registry(OpKind::Fusion),
                linear_ops: registry(OpKind::LinearTransform),
                sequence_ops: registry(OpKind::SeqTransform),
            },
            train: TrainConfig {
                epochs: 20,
                batch_size: 32,
                optimizer: "adam".into(),
                lr: 0.01,
                weight_decay: 0.0,
                arch_lr: 0.003,
                arch_weight_decay: 0.001,
                retrain_epochs: 20,
                retrain_warm_start: true,
            },
            ablation_path: ChainKind::Linear,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| MuseError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(MuseError::Config(format!("`{key}`: expected true/false, got `{v}`"))),
    }
}

fn parse_ops(key: &str, kind: OpKind, v: &str) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for name in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let canonical = kind
            .lookup(name)
            .map_err(|_| MuseError::Config(format!("`{key}`: unknown operator `{name}`")))?;
        if out.iter().any(|o| o == canonical) {
            return Err(MuseError::Config(format!("`{key}`: duplicate operator `{name}`")));
        }
        out.push(canonical.to_string());
    }
    if out.is_empty() {
        return Err(MuseError::Config(format!("`{key}`: empty operator list")));
    }
    Ok(out)
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                MuseError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "data.n" => self.data.n = parse_num(key, v)?,
            "data.k_t" => self.data.k_t = parse_num(key, v)?,
            "data.k_v" => self.data.k_v = parse_num(key, v)?,
            "data.d_t" => self.data.d_t = parse_num(key, v)?,
            "data.d_v" => self.data.d_v = parse_num(key, v)?,
            "data.rule" => self.data.rule = Rule::parse(v)?,
            "data.noise" => self.data.noise = parse_num(key, v)?,
            "data.row_spread" => self.data.row_spread = parse_num(key, v)?,
            "data.missing_text_rate" => self.data.missing_text_rate = parse_num(key, v)?,
            "data.missing_image_rate" => self.data.missing_image_rate = parse_num(key, v)?,
            "data.partial" => self.data.partial = parse_bool(key, v)?,
            "data.test_fraction" => self.data.test_fraction = parse_num(key, v)?,
            "data.valid_fraction" => self.data.valid_fraction = parse_num(key, v)?,
            "model.hidden" => self.model.hidden = parse_num(key, v)?,
            "model.linear_depth" => self.model.linear_depth = parse_num(key, v)?,
            "model.sequence_depth" => self.model.sequence_depth = parse_num(key, v)?,
            "model.topology" => self.model.topology = Topology::parse(v)?,
            "model.paths" => self.model.paths = PathSet::parse(v)?,
            "model.combiner" => self.model.combiner = Combiner::parse(v)?,
            "static_path.variant" => self.model.static_variant = StaticVariant::parse(v)?,
            "static_path.k" => self.model.cluster_k = parse_num(key, v)?,
            "static_path.kmeans_iters" => self.model.kmeans_iters = parse_num(key, v)?,
            "search.fusion_ops" => self.model.fusion_ops = parse_ops(key, OpKind::Fusion, v)?,
            "search.linear_ops" => self.model.linear_ops = parse_ops(key, OpKind::LinearTransform, v)?,
            "search.sequence_ops" => self.model.sequence_ops = parse_ops(key, OpKind::SeqTransform, v)?,
            "train.epochs" => self.train.epochs = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.optimizer" => {
                if v != "adam" && v != "sgd" {
                    return Err(MuseError::Config(format!("unknown optimizer `{v}`")));
                }
                self.train.optimizer = v.to_string();
            }
            "train.lr" => self.train.lr = parse_num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "train.arch_lr" => self.train.arch_lr = parse_num(key, v)?,
            "train.arch_weight_decay" => self.train.arch_weight_decay = parse_num(key, v)?,
            "retrain.epochs" => self.train.retrain_epochs = parse_num(key, v)?,
            "retrain.warm_start" => self.train.retrain_warm_start = parse_bool(key, v)?,
            "ablation.path" => {
                self.ablation_path = match v {
                    "linear" => ChainKind::Linear,
                    "sequence" => ChainKind::Sequence,
                    _ => return Err(MuseError::Config(format!("`ablation.path`: unknown path `{v}`"))),
                }
            }
            _ => return Err(MuseError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let bad = |m: &str| Err(MuseError::Config(m.to_string()));
        if d.n == 0 || d.k_t == 0 || d.k_v == 0 || d.d_t == 0 || d.d_v == 0 {
            return bad("data sizes must be positive");
        }
        for (name, r) in [
            ("data.missing_text_rate", d.missing_text_rate),
            ("data.missing_image_rate", d.missing_image_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(MuseError::Config(format!("{name} must lie in [0,1]")));
            }
        }
        if !(0.0..1.0).contains(&d.test_fraction) || !(0.0..1.0).contains(&d.valid_fraction) {
            return bad("split fractions must lie in [0,1)");
        }
        if d.noise < 0.0 || d.row_spread < 0.0 {
            return bad("noise and row spread must be non-negative");
        }
        let m = &self.model;
        if m.hidden == 0 || m.linear_depth == 0 || m.sequence_depth == 0 || m.cluster_k == 0 {
            return bad("model.hidden, depths and static_path.k must be at least 1");
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("train.batch_size must be at least 1");
        }
        if t.arch_lr < 0.0 {
            return bad("train.arch_lr must be non-negative");
        }
        Ok(())
    }

    /// Applies the `MUSE_SEED` environment override, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("MUSE_SEED") {
            self.seed = parse_num("MUSE_SEED", v.trim())?;
        }
        Ok(())
    }

    /// Canonical text form; `Config::parse(c.to_text()) == c`.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("data.n", d.n.to_string());
        kv("data.k_t", d.k_t.to_string());
        kv("data.k_v", d.k_v.to_string());
        kv("data.d_t", d.d_t.to_string());
        kv("data.d_v", d.d_v.to_string());
        kv("data.rule", d.rule.as_str().into());
        kv("data.noise", d.noise.to_string());
        kv("data.row_spread", d.row_spread.to_string());
        kv("data.missing_text_rate", d.missing_text_rate.to_string());
        kv("data.missing_image_rate", d.missing_image_rate.to_string());
        kv("data.partial", d.partial.to_string());
        kv("data.test_fraction", d.test_fraction.to_string());
        kv("data.valid_fraction", d.valid_fraction.to_string());
        kv("model.hidden", m.hidden.to_string());
        kv("model.linear_depth", m.linear_depth.to_string());
        kv("model.sequence_depth", m.sequence_depth.to_string());
        kv("model.topology", m.topology.as_str().into());
        kv("model.paths", m.paths.to_text());
        kv("model.combiner", m.combiner.as_str().into());
        kv("static_path.variant", m.static_variant.as_str().into());
        kv("static_path.k", m.cluster_k.to_string());
        kv("static_path.kmeans_iters", m.kmeans_iters.to_string());
        kv("search.fusion_ops", m.fusion_ops.join(","));
        kv("search.linear_ops", m.linear_ops.join(","));
        kv("search.sequence_ops", m.sequence_ops.join(","));
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.optimizer", t.optimizer.clone());
        kv("train.lr", t.lr.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.arch_lr", t.arch_lr.to_string());
        kv("train.arch_weight_decay", t.arch_weight_decay.to_string());
        kv("retrain.epochs", t.retrain_epochs.to_string());
        kv("retrain.warm_start", t.retrain_warm_start.to_string());
        kv("ablation.path", self.ablation_path.as_str().into());
        s
    }
}
