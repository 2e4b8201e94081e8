//! `synth`, `train` and `eval`. Each returns the lines it wants printed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use zsl_core::amssfe::{self, AmssfeModel};
use zsl_core::dataset::{self, Dataset};
use zsl_core::eval::{EvalReport, Scope};
use zsl_core::graphzsl::{self, GraphDataset, GraphModel};
use zsl_core::io::Manifest;
use zsl_core::rectify::{self, RectifyModel};
use zsl_core::{matrix, Matrix};

use crate::config::{DataKind, Normalize, RunConfig};
use crate::{CliError, CliResult, Method};

pub const HISTORY_FILE: &str = "history.csv";
pub const MAPPING_HISTORY_FILE: &str = "mapping_history.csv";
const MANIFEST: &str = "manifest.txt";

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

/// Marker files that identify a directory this tool may replace wholesale.
fn looks_owned(dir: &Path) -> bool {
    [MANIFEST, dataset::X_TRAIN].iter().any(|f| dir.join(f).is_file())
}

/// Builds `out` in a sibling staging directory and swaps it in only on
/// success, so a failed run leaves no partial output behind.
pub fn write_dir_atomically(out: &Path, build: impl FnOnce(&Path) -> CliResult<()>) -> CliResult<()> {
    if out.exists() {
        let empty = std::fs::read_dir(out)
            .map_err(|e| CliError::io(format!("cannot read {}: {e}", out.display())))?
            .next()
            .is_none();
        if !out.is_dir() || !(empty || looks_owned(out)) {
            return Err(CliError::config(format!(
                "refusing to overwrite {}: not an output directory of this tool",
                out.display()
            )));
        }
    }
    let name = out
        .file_name()
        .ok_or_else(|| CliError::config(format!("bad output path {}", out.display())))?
        .to_string_lossy()
        .into_owned();
    let staging = out.with_file_name(format!(".{name}.partial"));
    let io_err = |what: &str, p: &Path, e: std::io::Error| CliError::io(format!("cannot {what} {}: {e}", p.display()));
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| io_err("remove", &staging, e))?;
    }
    std::fs::create_dir_all(&staging).map_err(|e| io_err("create", &staging, e))?;
    if let Err(e) = build(&staging) {
        let _ = std::fs::remove_dir_all(&staging);
        return Err(e);
    }
    if out.exists() {
        std::fs::remove_dir_all(out).map_err(|e| io_err("replace", out, e))?;
    }
    std::fs::rename(&staging, out).map_err(|e| io_err("move output to", out, e))
}

pub fn synth(spec: &Path, out: &Path) -> CliResult<Vec<String>> {
    let cfg = RunConfig::load(spec)?;
    let b = &cfg.graph.base;
    let mut lines = vec![
        format!("seen={} unseen={}", b.m_seen, b.v_unseen),
        format!("visual_dim={} semantic_dim={}", b.d, b.n),
    ];
    match cfg.kind {
        DataKind::Zsl => {
            let ds = dataset::synthesize_dataset(b)?;
            write_dir_atomically(out, |dir| Ok(dataset::save_dataset(&ds, dir)?))?;
            lines.push(format!("train={} test={}", ds.y_train.len(), ds.y_test.len()));
        }
        DataKind::Graph => {
            let gd = graphzsl::synthesize_graph_dataset(&cfg.graph)?;
            write_dir_atomically(out, |dir| Ok(gd.save(dir)?))?;
            lines.push(format!("train={} test={}", gd.base.y_train.len(), gd.base.y_test.len()));
            lines.push(format!("parts={}", gd.parts()));
        }
    }
    Ok(lines)
}

pub fn load_zsl(data: &Path, normalize: Normalize) -> CliResult<Dataset> {
    let ds = dataset::load_dataset(data)?;
    Ok(match normalize {
        Normalize::None => ds,
        Normalize::L2 => ds.l2_normalized()?,
    })
}

pub fn load_graph(data: &Path, normalize: Normalize) -> CliResult<GraphDataset> {
    let mut gd = GraphDataset::load(data)?;
    if normalize == Normalize::L2 {
        gd.base = gd.base.l2_normalized()?;
        for f in gd.parts_train.iter_mut().chain(gd.parts_test.iter_mut()) {
            *f = matrix::l2_normalize_rows(f)?;
        }
    }
    Ok(gd)
}

/// A model of any of the three kinds, as trained or loaded from a bundle.
pub enum Trained {
    Rectify(RectifyModel),
    Amssfe(AmssfeModel),
    Graph(GraphModel),
}

/// Trains `method` on the data directory with a resolved configuration.
pub fn fit(method: Method, data: &Path, cfg: &RunConfig) -> CliResult<Trained> {
    Ok(match method {
        Method::Rectify => Trained::Rectify(rectify::train(&load_zsl(data, cfg.normalize)?, &cfg.rectify)?),
        Method::Amssfe => Trained::Amssfe(amssfe::train(&load_zsl(data, cfg.normalize)?, &cfg.amssfe)?),
        Method::Graphzsl => Trained::Graph(graphzsl::train(&load_graph(data, cfg.normalize)?, &cfg.graphzsl)?),
    })
}

fn history_csv(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut s = format!("epoch,{header}\n");
    for (i, r) in rows.enumerate() {
        let _ = writeln!(s, "{i},{r}");
    }
    s
}

impl Trained {
    pub fn method(&self) -> Method {
        match self {
            Trained::Rectify(_) => Method::Rectify,
            Trained::Amssfe(_) => Method::Amssfe,
            Trained::Graph(_) => Method::Graphzsl,
        }
    }

    /// Writes the bundle plus its training-history CSV(s).
    pub fn save(&self, dir: &Path) -> CliResult<()> {
        match self {
            Trained::Rectify(m) => {
                m.save(dir)?;
                let rows = m.history.iter().map(|j| format!("{j:?}"));
                write_file(&dir.join(HISTORY_FILE), &history_csv("objective", rows))
            }
            Trained::Amssfe(m) => {
                m.save(dir)?;
                let rows = m.expansion.history.iter().map(|e| {
                    format!("{:?},{:?},{:?},{:?}", e.total, e.reconstruction, e.kl, e.alignment)
                });
                write_file(
                    &dir.join(HISTORY_FILE),
                    &history_csv("total,reconstruction,kl,alignment", rows),
                )?;
                let rows = m.mapping.history.iter().map(|l| format!("{l:?}"));
                write_file(&dir.join(MAPPING_HISTORY_FILE), &history_csv("loss", rows))
            }
            Trained::Graph(m) => {
                m.save(dir)?;
                let rows = m.gcn.history.iter().map(|l| format!("{l:?}"));
                write_file(&dir.join(HISTORY_FILE), &history_csv("mae", rows))
            }
        }
    }

    pub fn load(dir: &Path) -> CliResult<(Self, Manifest)> {
        let man = Manifest::load(dir.join(MANIFEST))?;
        let method: Method = man.require("method")?.parse()?;
        let model = match method {
            Method::Rectify => Trained::Rectify(RectifyModel::load(dir)?),
            Method::Amssfe => Trained::Amssfe(AmssfeModel::load(dir)?),
            Method::Graphzsl => Trained::Graph(GraphModel::load(dir)?),
        };
        Ok((model, man))
    }

    fn summary(&self) -> String {
        match self {
            Trained::Rectify(m) => format!(
                "epochs={} final_objective={:.6e}",
                m.epochs_run,
                m.history.last().copied().unwrap_or(f64::NAN)
            ),
            Trained::Amssfe(m) => format!(
                "k={} expansion_epochs={} final_expansion_loss={:.6e} final_mapping_loss={:.6e}",
                m.expansion.k(),
                m.expansion.history.len(),
                m.expansion.history.last().map_or(f64::NAN, |e| e.total),
                m.mapping.history.last().copied().unwrap_or(f64::NAN)
            ),
            Trained::Graph(m) => format!(
                "edges={} epochs={} final_mae={:.6e}",
                graphzsl::edge_count(&m.gcn.adjacency),
                m.gcn.history.len(),
                m.gcn.history.last().copied().unwrap_or(f64::NAN)
            ),
        }
    }
}

pub fn train(method: Method, data: &Path, config: &Path, out: &Path) -> CliResult<Vec<String>> {
    let cfg = RunConfig::load(config)?;
    let model = fit(method, data, &cfg)?;
    write_dir_atomically(out, |dir| {
        model.save(dir)?;
        // Record how inputs were prepared so evaluation can repeat it.
        let path = dir.join(MANIFEST);
        let mut man = Manifest::load(&path)?;
        man.set("data.normalize", cfg.normalize.tag()).set("seed", cfg.seed);
        man.save(&path)?;
        Ok(())
    })?;
    Ok(vec![format!("trained {}: {}", method.tag(), model.summary())])
}

/// Candidate prototypes and their class ids for a scope.
fn candidates(p_seen: &Matrix, p_unseen: &Matrix, ds: &Dataset, scope: Scope) -> CliResult<(Matrix, Vec<usize>)> {
    Ok(match scope {
        Scope::Czsl => (p_unseen.clone(), ds.unseen_ids.clone()),
        Scope::Gzsl => {
            let ids = ds.seen_ids.iter().chain(&ds.unseen_ids).copied().collect();
            (matrix::vconcat(p_seen, p_unseen)?, ids)
        }
    })
}

/// Test rows a scope evaluates on.
pub fn test_rows(ds: &Dataset, scope: Scope) -> CliResult<Vec<usize>> {
    let rows = match scope {
        Scope::Czsl => ds.unseen_test_rows(),
        Scope::Gzsl => {
            if ds.seen_test_rows().is_empty() {
                return Err(CliError::config(
                    "gzsl evaluation needs seen-class test examples; the dataset has none",
                ));
            }
            (0..ds.y_test.len()).collect()
        }
    };
    if rows.is_empty() {
        return Err(CliError::config("no test examples for this scope"));
    }
    Ok(rows)
}

fn report(
    ranked: &[Vec<usize>],
    ids: &[usize],
    truths: &[usize],
    ks: &[usize],
    ds: &Dataset,
    scope: Scope,
) -> CliResult<EvalReport> {
    let ranked = zsl_core::eval::to_class_ids(ranked, ids);
    let split = match scope {
        Scope::Czsl => None,
        Scope::Gzsl => Some((ds.seen_ids.as_slice(), ds.unseen_ids.as_slice())),
    };
    Ok(EvalReport::from_rankings(&ranked, truths, ks, ids, split)?)
}

fn check_k(ks: &[usize], classes: usize) -> CliResult<usize> {
    let kmax = *ks.iter().max().ok_or_else(|| CliError::config("empty k list"))?;
    if kmax > classes {
        return Err(CliError::config(format!(
            "k = {kmax} exceeds the {classes} candidate classes"
        )));
    }
    Ok(kmax)
}

/// Ranked candidate reports of a trained model; rectify yields both
/// directions, the others a single unprefixed report.
pub fn evaluate(model: &Trained, data: &Path, normalize: Normalize, scope: Scope, ks: &[usize]) -> CliResult<Vec<(String, EvalReport)>> {
    match model {
        Trained::Graph(m) => {
            let gd = load_graph(data, normalize)?;
            let ds = &gd.base;
            let rows = test_rows(ds, scope)?;
            let (_, ids) = candidates(&ds.p_seen, &ds.p_unseen, ds, scope)?;
            let kmax = check_k(ks, ids.len())?;
            let graphs: Vec<Matrix> = rows.iter().map(|&i| gd.parts_test[i].clone()).collect();
            let truths: Vec<usize> = rows.iter().map(|&i| ds.y_test[i]).collect();
            let ranked = graphzsl::recognize_graph(&m.gcn, &graphs, &ds.p_seen, &ds.p_unseen, scope, kmax)?;
            Ok(vec![(String::new(), report(&ranked, &ids, &truths, ks, ds, scope)?)])
        }
        _ => {
            let ds = load_zsl(data, normalize)?;
            let rows = test_rows(&ds, scope)?;
            let x = matrix::select_rows(&ds.x_test, &rows);
            let truths: Vec<usize> = rows.iter().map(|&i| ds.y_test[i]).collect();
            match model {
                Trained::Rectify(m) => {
                    let (protos, ids) = candidates(&m.p_seen_adj, &m.p_unseen_adj, &ds, scope)?;
                    let kmax = check_k(ks, ids.len())?;
                    let v2s = rectify::infer_v2s(m, &x, &protos, kmax)?;
                    let s2v = rectify::infer_s2v(m, &x, &protos, kmax)?;
                    Ok(vec![
                        ("v2s.".into(), report(&v2s, &ids, &truths, ks, &ds, scope)?),
                        ("s2v.".into(), report(&s2v, &ids, &truths, ks, &ds, scope)?),
                    ])
                }
                Trained::Amssfe(m) => {
                    let e = &m.expansion;
                    let (_, ids) = candidates(&e.p_seen_combined, &e.p_unseen_combined, &ds, scope)?;
                    let kmax = check_k(ks, ids.len())?;
                    let ranked =
                        amssfe::recognize(&m.mapping, &x, &e.p_seen_combined, &e.p_unseen_combined, scope, kmax)?;
                    Ok(vec![(String::new(), report(&ranked, &ids, &truths, ks, &ds, scope)?)])
                }
                Trained::Graph(_) => unreachable!(),
            }
        }
    }
}

pub fn report_path(model_dir: &Path, scope: Scope) -> PathBuf {
    model_dir.join(format!("report_{scope}.txt"))
}

pub fn eval(model_dir: &Path, data: &Path, scope: Scope, ks: &[usize]) -> CliResult<Vec<String>> {
    let (model, man) = Trained::load(model_dir)?;
    let normalize = Normalize::from_tag(man.get("data.normalize").unwrap_or("none")).map_err(CliError::config)?;
    let reports = evaluate(&model, data, normalize, scope, ks)?;
    let mut out = Manifest::new();
    out.set("method", model.method().tag()).set("scope", scope);
    let mut lines = Vec::new();
    for (prefix, r) in &reports {
        r.write_into(&mut out, prefix);
        lines.extend(r.summary_lines(prefix));
        let tag = prefix.trim_end_matches('.');
        let name = if tag.is_empty() {
            format!("confusion_{scope}.csv")
        } else {
            format!("confusion_{scope}_{tag}.csv")
        };
        r.save_confusion_csv(model_dir.join(name))?;
    }
    out.save(report_path(model_dir, scope))?;
    Ok(lines)
}
