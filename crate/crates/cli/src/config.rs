//! INI-style run configuration.
//!
//! ```text
//! seed = 7            # mandatory, before any section
//! [data]
//! m_seen = 15
//! [amssfe]
//! hidden = 64,32
//! ```
//!
//! `#` starts a comment anywhere on a line. Keys outside the tables below
//! are rejected, as are duplicate keys and unknown sections.

use std::collections::BTreeMap;
use std::path::Path;

use zsl_core::amssfe::AmssfeParams;
use zsl_core::dataset::SyntheticSpec;
use zsl_core::eval::Scope;
use zsl_core::graphzsl::{AdjacencyRule, GraphParams, GraphSynthSpec};
use zsl_core::rectify::RectifyParams;

use crate::CliError;

pub const SECTIONS: &[&str] = &["data", "rectify", "amssfe", "graphzsl", "eval"];

const DATA_KEYS: &[&str] = &[
    "kind",
    "normalize",
    "m_seen",
    "v_unseen",
    "d",
    "n",
    "examples_per_class",
    "noise_sigma",
    "max_cosine",
    "nonnegative",
    "seen_test_per_class",
    "parts",
    "informative_pairs",
    "pair_noise",
    "part_spread",
];
const RECTIFY_KEYS: &[&str] = &[
    "alpha",
    "beta",
    "lambda1",
    "gamma1",
    "lambda2",
    "gamma2",
    "k_neighbors",
    "max_epochs",
    "conv_tol",
    "ridge",
];
const AMSSFE_KEYS: &[&str] = &[
    "k",
    "alpha",
    "beta",
    "g_neighbors",
    "hidden",
    "epochs",
    "batch_size",
    "lr",
    "patience",
    "min_delta",
    "mapping_epochs",
    "mapping_lr",
    "recon_weight",
];
const GRAPHZSL_KEYS: &[&str] = &[
    "epsilon",
    "target_edges",
    "classifier_epochs",
    "classifier_lr",
    "classifier_l2",
    "channels",
    "head_hidden",
    "epochs",
    "batch_size",
    "lr",
    "crop_w",
    "crop_h",
];
const EVAL_KEYS: &[&str] = &["scope", "k"];

fn known_keys(section: &str) -> Option<&'static [&'static str]> {
    Some(match section {
        "data" => DATA_KEYS,
        "rectify" => RECTIFY_KEYS,
        "amssfe" => AMSSFE_KEYS,
        "graphzsl" => GRAPHZSL_KEYS,
        "eval" => EVAL_KEYS,
        _ => return None,
    })
}

/// Parsed file: the top-level keys plus one ordered map per section.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ini {
    pub top: BTreeMap<String, String>,
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut ini = Ini::default();
        let mut current: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| format!("line {}: {msg}", no + 1);
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("malformed section header {line:?}")))?
                    .trim();
                if ini.sections.contains_key(name) {
                    return Err(at(format!("section [{name}] appears twice")));
                }
                ini.sections.insert(name.to_string(), BTreeMap::new());
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(at("empty key".into()));
            }
            let map = match &current {
                Some(s) => ini.sections.get_mut(s).unwrap(),
                None => &mut ini.top,
            };
            if map.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(at(format!("duplicate key {key:?}")));
            }
        }
        Ok(ini)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
        Ini::parse(&text).map_err(|m| CliError::config(format!("{}: {m}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Zsl,
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalize {
    None,
    L2,
}

impl Normalize {
    pub fn tag(self) -> &'static str {
        match self {
            Normalize::None => "none",
            Normalize::L2 => "l2",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Normalize::None),
            "l2" => Ok(Normalize::L2),
            _ => Err(format!("normalize must be none or l2, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub scope: Scope,
    pub ks: Vec<usize>,
}

/// Fully typed configuration with every hyperparameter resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub kind: DataKind,
    pub normalize: Normalize,
    /// Synthetic generator; `graph.base` doubles as the plain spec.
    pub graph: GraphSynthSpec,
    pub rectify: RectifyParams,
    pub amssfe: AmssfeParams,
    pub graphzsl: GraphParams,
    pub eval: EvalConfig,
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn positive(key: &str, v: &str) -> Result<f64, String> {
    let x: f64 = num(key, v)?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{key} must be a positive number, got {v}"))
    }
}

fn nonneg(key: &str, v: &str) -> Result<f64, String> {
    let x: f64 = num(key, v)?;
    if x >= 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{key} must be a finite number >= 0, got {v}"))
    }
}

fn unit(key: &str, v: &str) -> Result<f64, String> {
    let x: f64 = num(key, v)?;
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("{key} must lie in [0, 1], got {v}"))
    }
}

fn count(key: &str, v: &str) -> Result<usize, String> {
    let x: usize = num(key, v)?;
    if x >= 1 {
        Ok(x)
    } else {
        Err(format!("{key} must be >= 1"))
    }
}

fn flag(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {v:?}")),
    }
}

/// Comma-separated positive integers; `allow_empty` admits "" (no layers).
fn widths(key: &str, v: &str, allow_empty: bool) -> Result<Vec<usize>, String> {
    if v.is_empty() {
        return if allow_empty {
            Ok(Vec::new())
        } else {
            Err(format!("{key} must list at least one width"))
        };
    }
    v.split(',').map(|w| count(key, w.trim())).collect()
}

fn pairs(key: &str, v: &str) -> Result<Vec<(usize, usize)>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| {
            let (a, b) = p
                .trim()
                .split_once('-')
                .ok_or_else(|| format!("{key}: expected i-j pairs, got {p:?}"))?;
            Ok((num(key, a.trim())?, num(key, b.trim())?))
        })
        .collect()
}

pub fn parse_ks(v: &str) -> Result<Vec<usize>, String> {
    let ks = widths("k", v, false)?;
    let mut sorted = ks.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != ks.len() {
        return Err(format!("k list {v:?} has duplicates"));
    }
    Ok(sorted)
}

impl RunConfig {
    pub fn defaults(seed: u64, kind: DataKind) -> Self {
        let mut graph = GraphSynthSpec::default();
        if kind == DataKind::Zsl {
            graph.base = SyntheticSpec::default();
        }
        let mut cfg = RunConfig {
            seed,
            kind,
            normalize: Normalize::None,
            graph,
            rectify: RectifyParams::default(),
            amssfe: AmssfeParams::default(),
            graphzsl: GraphParams::default(),
            eval: EvalConfig {
                scope: Scope::Czsl,
                ks: vec![1],
            },
        };
        cfg.reseed();
        cfg
    }

    fn reseed(&mut self) {
        self.graph.base.seed = self.seed;
        self.amssfe.expansion.seed = self.seed;
        self.amssfe.mapping.seed = self.seed;
        self.graphzsl.gcn.seed = self.seed;
    }

    pub fn from_ini(ini: &Ini) -> Result<Self, CliError> {
        for key in ini.top.keys() {
            if key != "seed" {
                return Err(CliError::config(format!(
                    "key {key:?} must sit inside a section (only seed is top-level)"
                )));
            }
        }
        let seed_text = ini
            .top
            .get("seed")
            .ok_or_else(|| CliError::config("missing mandatory top-level key: seed"))?;
        let seed: u64 = num("seed", seed_text).map_err(CliError::config)?;
        for name in ini.sections.keys() {
            if known_keys(name).is_none() {
                return Err(CliError::config(format!("unknown section [{name}]")));
            }
        }
        let data = ini.sections.get("data");
        let kind = match data.and_then(|d| d.get("kind")).map(String::as_str) {
            None | Some("zsl") => DataKind::Zsl,
            Some("graph") => DataKind::Graph,
            Some(other) => return Err(CliError::config(format!("[data] kind must be zsl or graph, got {other:?}"))),
        };
        let mut cfg = RunConfig::defaults(seed, kind);
        for (section, keys) in &ini.sections {
            for (key, value) in keys {
                if section == "data" && key == "kind" {
                    continue;
                }
                cfg.set(section, key, value)?;
            }
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        RunConfig::from_ini(&Ini::load(path)?)
    }

    /// Applies one `section.key = value` setting.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), CliError> {
        let allowed = known_keys(section).ok_or_else(|| CliError::config(format!("unknown section [{section}]")))?;
        if !allowed.contains(&key) {
            return Err(CliError::config(format!("unknown key {key:?} in [{section}]")));
        }
        self.apply(section, key, v)
            .map_err(|m| CliError::config(format!("[{section}] {m}")))
    }

    fn apply(&mut self, section: &str, key: &str, v: &str) -> Result<(), String> {
        match section {
            "data" => {
                let b = &mut self.graph.base;
                match key {
                    "normalize" => self.normalize = Normalize::from_tag(v)?,
                    "m_seen" => b.m_seen = num(key, v)?,
                    "v_unseen" => b.v_unseen = num(key, v)?,
                    "d" => b.d = num(key, v)?,
                    "n" => b.n = num(key, v)?,
                    "examples_per_class" => b.examples_per_class = count(key, v)?,
                    "noise_sigma" => b.noise_sigma = nonneg(key, v)?,
                    "max_cosine" => b.max_cosine = num(key, v)?,
                    "nonnegative" => b.nonnegative = flag(key, v)?,
                    "seen_test_per_class" => b.seen_test_per_class = num(key, v)?,
                    "parts" => self.graph.parts = num(key, v)?,
                    "informative_pairs" => self.graph.informative_pairs = pairs(key, v)?,
                    "pair_noise" => self.graph.pair_noise = nonneg(key, v)?,
                    "part_spread" => self.graph.part_spread = nonneg(key, v)?,
                    _ => unreachable!(),
                }
            }
            "rectify" => {
                let r = &mut self.rectify;
                match key {
                    "alpha" => r.alpha = nonneg(key, v)?,
                    "beta" => r.beta = nonneg(key, v)?,
                    "lambda1" => r.lambda1 = unit(key, v)?,
                    "gamma1" => r.gamma1 = unit(key, v)?,
                    "lambda2" => r.lambda2 = unit(key, v)?,
                    "gamma2" => r.gamma2 = unit(key, v)?,
                    "k_neighbors" => r.k_neighbors = count(key, v)?,
                    "max_epochs" => r.max_epochs = count(key, v)?,
                    "conv_tol" => r.conv_tol = positive(key, v)?,
                    "ridge" => r.ridge = nonneg(key, v)?,
                    _ => unreachable!(),
                }
            }
            "amssfe" => {
                let e = &mut self.amssfe.expansion;
                let m = &mut self.amssfe.mapping;
                match key {
                    "k" => e.k = Some(count(key, v)?),
                    "alpha" => e.alpha = nonneg(key, v)?,
                    "beta" => e.beta = nonneg(key, v)?,
                    "g_neighbors" => e.g_neighbors = count(key, v)?,
                    "hidden" => e.hidden = widths(key, v, false)?,
                    "epochs" => e.epochs = count(key, v)?,
                    "batch_size" => e.batch_size = count(key, v)?,
                    "lr" => e.lr = positive(key, v)?,
                    "patience" => e.patience = num(key, v)?,
                    "min_delta" => e.min_delta = nonneg(key, v)?,
                    "mapping_epochs" => m.epochs = num(key, v)?,
                    "mapping_lr" => m.lr = positive(key, v)?,
                    "recon_weight" => m.recon_weight = nonneg(key, v)?,
                    _ => unreachable!(),
                }
            }
            "graphzsl" => {
                let g = &mut self.graphzsl;
                match key {
                    "epsilon" => {
                        let x: f64 = num(key, v)?;
                        if !x.is_finite() {
                            return Err("epsilon must be finite".into());
                        }
                        g.rule = AdjacencyRule::Epsilon(x);
                    }
                    "target_edges" => g.rule = AdjacencyRule::TargetEdges(num(key, v)?),
                    "classifier_epochs" => g.classifier.epochs = count(key, v)?,
                    "classifier_lr" => g.classifier.lr = positive(key, v)?,
                    "classifier_l2" => g.classifier.l2 = nonneg(key, v)?,
                    "channels" => g.gcn.channels = widths(key, v, false)?,
                    "head_hidden" => g.gcn.head_hidden = widths(key, v, true)?,
                    "epochs" => g.gcn.epochs = count(key, v)?,
                    "batch_size" => g.gcn.batch_size = count(key, v)?,
                    "lr" => g.gcn.lr = positive(key, v)?,
                    "crop_w" => g.crop_w = positive(key, v)?,
                    "crop_h" => g.crop_h = positive(key, v)?,
                    _ => unreachable!(),
                }
            }
            "eval" => match key {
                "scope" => self.eval.scope = v.parse().map_err(|e: zsl_core::ZslError| e.to_string())?,
                "k" => self.eval.ks = parse_ks(v)?,
                _ => unreachable!(),
            },
            _ => unreachable!(),
        }
        Ok(())
    }

    /// Cross-key checks that do not depend on the dataset.
    pub fn check(&self) -> Result<(), CliError> {
        let cfg = |e: zsl_core::ZslError| CliError::config(e.to_string());
        self.graph.base.validate().map_err(cfg)?;
        // Dataset-dependent bounds (neighbour counts) are rechecked at train time.
        self.rectify.validate(usize::MAX).map_err(cfg)?;
        self.amssfe.expansion.validate(usize::MAX).map_err(cfg)?;
        self.graphzsl.gcn.validate().map_err(cfg)?;
        Ok(())
    }
}
