//! Grid search on a held-out split of the seen classes.
//!
//! A grid file is a run configuration plus a `[grid]` section whose keys
//! name settings (`section.key`, or a bare key of the tuned method's
//! section) and whose values list alternatives separated by `|`:
//!
//! ```text
//! seed = 1
//! [amssfe]
//! epochs = 30
//! [grid]
//! alpha = 1 | 5 | 9
//! amssfe.beta = 1 | 77
//! ```
//!
//! `preset = amssfe-wide` adds the α ∈ 1..=10, β ∈ 1..=110 sweep. Passing
//! the preset name instead of a file path uses it with default settings.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zsl_core::amssfe;
use zsl_core::dataset::Dataset;
use zsl_core::eval::{self, Scope};
use zsl_core::graphzsl::{self, GraphDataset};
use zsl_core::{matrix, rectify};

use crate::commands::{load_graph, load_zsl};
use crate::config::{DataKind, Ini, RunConfig};
use crate::{thread_budget, CliError, CliResult, Method};

pub const PRESET_AMSSFE: &str = "amssfe-wide";
/// Fraction of seen classes held out as pseudo-unseen during tuning.
pub const HOLDOUT_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub base: RunConfig,
    /// `(section, key, alternatives)` in declaration-sorted order.
    pub axes: Vec<(String, String, Vec<String>)>,
}

fn preset_axes(name: &str, method: Method) -> CliResult<Vec<(String, String, Vec<String>)>> {
    if name != PRESET_AMSSFE {
        return Err(CliError::config(format!("unknown preset {name:?}")));
    }
    if method != Method::Amssfe {
        return Err(CliError::config(format!("preset {name} applies to amssfe only")));
    }
    let alphas = (1..=10).map(|a| a.to_string()).collect();
    let mut betas: Vec<String> = vec!["1".into()];
    betas.extend((1..=10).map(|i| (11 * i).to_string()));
    Ok(vec![
        ("amssfe".into(), "alpha".into(), alphas),
        ("amssfe".into(), "beta".into(), betas),
    ])
}

impl Grid {
    /// Reads `spec` as a grid file, or as a preset name when no such file
    /// exists.
    pub fn load(spec: &str, method: Method) -> CliResult<Self> {
        let path = Path::new(spec);
        if !path.exists() {
            if spec == PRESET_AMSSFE {
                return Ok(Grid {
                    base: RunConfig::defaults(0, DataKind::Zsl),
                    axes: preset_axes(spec, method)?,
                });
            }
            return Err(CliError::io(format!("grid file {spec} does not exist")));
        }
        let mut ini = Ini::load(path)?;
        let grid = ini
            .sections
            .remove("grid")
            .ok_or_else(|| CliError::config("grid file has no [grid] section"))?;
        let base = RunConfig::from_ini(&ini)?;
        let mut axes = Vec::new();
        for (key, values) in &grid {
            if key == "preset" {
                axes.extend(preset_axes(values, method)?);
                continue;
            }
            let (section, name) = match key.split_once('.') {
                Some((s, k)) => (s.to_string(), k.to_string()),
                None => (method.tag().to_string(), key.clone()),
            };
            let alts: Vec<String> = values.split('|').map(|v| v.trim().to_string()).collect();
            if alts.iter().any(String::is_empty) {
                return Err(CliError::config(format!("[grid] {key}: empty alternative")));
            }
            axes.push((section, name, alts));
        }
        if axes.iter().any(|(s, k, _)| axes.iter().filter(|(s2, k2, _)| s == s2 && k == k2).count() > 1) {
            return Err(CliError::config("[grid] sweeps the same setting twice"));
        }
        let g = Grid { base, axes };
        // Surface bad alternatives before any training starts.
        for i in 0..g.len() {
            g.point(i)?;
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|(_, _, v)| v.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Settings of point `i`, first axis varying slowest.
    pub fn settings(&self, mut i: usize) -> Vec<(String, String)> {
        let mut out = vec![(String::new(), String::new()); self.axes.len()];
        for (a, (section, key, alts)) in self.axes.iter().enumerate().rev() {
            out[a] = (format!("{section}.{key}"), alts[i % alts.len()].clone());
            i /= alts.len();
        }
        out
    }

    pub fn point(&self, i: usize) -> CliResult<RunConfig> {
        let mut cfg = self.base.clone();
        for ((section, key, _), (_, value)) in self.axes.iter().zip(self.settings(i)) {
            cfg.set(section, key, &value)?;
        }
        cfg.check()?;
        Ok(cfg)
    }
}

/// Held-out seen classes (sorted local indices) for a split of `m`.
pub fn holdout_classes(m: usize, seed: u64) -> CliResult<Vec<usize>> {
    let h = ((HOLDOUT_FRACTION * m as f64).round() as usize).max(1);
    if m < h + 2 {
        return Err(CliError::config(format!(
            "tuning needs at least {} seen classes, the dataset has {m}",
            h + 2
        )));
    }
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_5eed));
    let mut held = idx[..h].to_vec();
    held.sort_unstable();
    Ok(held)
}

/// Train rows of retained classes form the new training split; train rows
/// of held-out classes become the pseudo-unseen test split.
pub fn validation_split(ds: &Dataset, held: &[usize]) -> CliResult<(Dataset, Vec<usize>, Vec<usize>)> {
    let keep: Vec<usize> = (0..ds.num_seen()).filter(|c| !held.contains(c)).collect();
    let local = ds.train_local_labels();
    let train_rows: Vec<usize> = (0..local.len()).filter(|&i| !held.contains(&local[i])).collect();
    let test_rows: Vec<usize> = (0..local.len()).filter(|&i| held.contains(&local[i])).collect();
    let pick = |rows: &[usize]| rows.iter().map(|&i| ds.y_train[i]).collect::<Vec<_>>();
    let split = Dataset {
        x_train: matrix::select_rows(&ds.x_train, &train_rows),
        y_train: pick(&train_rows),
        p_seen: matrix::select_rows(&ds.p_seen, &keep),
        p_unseen: matrix::select_rows(&ds.p_seen, held),
        x_test: matrix::select_rows(&ds.x_train, &test_rows),
        y_test: pick(&test_rows),
        seen_ids: keep.iter().map(|&c| ds.seen_ids[c]).collect(),
        unseen_ids: held.iter().map(|&c| ds.seen_ids[c]).collect(),
    };
    split.validate()?;
    Ok((split, train_rows, test_rows))
}

enum Data {
    Zsl(Dataset),
    Graph(GraphDataset),
}

/// Validation hit@k of one configuration.
fn score(method: Method, data: &Data, cfg: &RunConfig, k: usize) -> CliResult<f64> {
    let (ranked, ds) = match (method, data) {
        (Method::Rectify, Data::Zsl(ds)) => {
            let m = rectify::train(ds, &cfg.rectify)?;
            (rectify::infer_v2s(&m, &ds.x_test, &m.p_unseen_adj, k)?, ds)
        }
        (Method::Amssfe, Data::Zsl(ds)) => {
            let m = amssfe::train(ds, &cfg.amssfe)?;
            let e = &m.expansion;
            let r = amssfe::recognize(&m.mapping, &ds.x_test, &e.p_seen_combined, &e.p_unseen_combined, Scope::Czsl, k)?;
            (r, ds)
        }
        (Method::Graphzsl, Data::Graph(gd)) => {
            let m = graphzsl::train(gd, &cfg.graphzsl)?;
            let ds = &gd.base;
            (graphzsl::recognize_graph(&m.gcn, &gd.parts_test, &ds.p_seen, &ds.p_unseen, Scope::Czsl, k)?, ds)
        }
        _ => unreachable!("data kind follows the method"),
    };
    let ranked = eval::to_class_ids(&ranked, &ds.unseen_ids);
    Ok(eval::hit_at_k(&ranked, &ds.y_test, k)?)
}

pub fn tune(method: Method, data: &Path, grid_spec: &str) -> CliResult<Vec<String>> {
    let grid = Grid::load(grid_spec, method)?;
    if grid.is_empty() {
        return Err(CliError::config("empty grid"));
    }
    let base = &grid.base;
    let k = base.eval.ks[0];
    if base.eval.scope != Scope::Czsl {
        log::warn!("tuning always scores czsl hit@{k} on the held-out seen classes");
    }
    let prepared = match method {
        Method::Graphzsl => {
            let gd = load_graph(data, base.normalize)?;
            let held = holdout_classes(gd.base.num_seen(), base.seed)?;
            let (split, train_rows, test_rows) = validation_split(&gd.base, &held)?;
            let take = |rows: &[usize]| rows.iter().map(|&i| gd.parts_train[i].clone()).collect();
            let v = GraphDataset {
                parts_train: take(&train_rows),
                parts_test: take(&test_rows),
                base: split,
                ..gd.clone()
            };
            v.validate()?;
            Data::Graph(v)
        }
        _ => {
            let ds = load_zsl(data, base.normalize)?;
            let held = holdout_classes(ds.num_seen(), base.seed)?;
            Data::Zsl(validation_split(&ds, &held)?.0)
        }
    };
    let held_count = match &prepared {
        Data::Zsl(d) => d.num_unseen(),
        Data::Graph(g) => g.base.num_unseen(),
    };
    if k > held_count {
        return Err(CliError::config(format!(
            "k = {k} exceeds the {held_count} held-out validation classes"
        )));
    }

    let n = grid.len();
    let workers = thread_budget()?.min(n);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<f64>>>> = Mutex::new(vec![None; n]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = grid.point(i).and_then(|cfg| score(method, &prepared, &cfg, k));
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let results: Vec<CliResult<f64>> = results.into_inner().unwrap().into_iter().map(Option::unwrap).collect();

    if let Some(Err(e)) = results.iter().find(|r| r.is_err()).filter(|_| results.iter().all(|r| r.is_err())) {
        return Err(e.clone());
    }
    let mut order: Vec<usize> = (0..n).collect();
    let key = |i: usize| results[i].as_ref().ok().copied().unwrap_or(f64::NEG_INFINITY);
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));

    let metric = format!("hit@{k}");
    let names: Vec<String> = grid.settings(0).into_iter().map(|(name, _)| name).collect();
    let mut lines = vec![
        format!("points={n} holdout_classes={held_count} metric={metric}"),
        std::iter::once("rank,point".to_string())
            .chain(names.iter().cloned())
            .chain(std::iter::once(metric.clone()))
            .collect::<Vec<_>>()
            .join(","),
    ];
    for (rank, &i) in order.iter().enumerate() {
        let mut row = vec![(rank + 1).to_string(), i.to_string()];
        row.extend(grid.settings(i).into_iter().map(|(_, v)| v));
        row.push(match &results[i] {
            Ok(v) => format!("{v:.4}"),
            Err(e) => format!("failed({})", e.message.replace(',', ";")),
        });
        lines.push(row.join(","));
    }
    let best = order[0];
    let settings: BTreeMap<String, String> = grid.settings(best).into_iter().collect();
    let desc: Vec<String> = settings.iter().map(|(k, v)| format!("{k}={v}")).collect();
    lines.push(format!(
        "best point={best} {}{metric}={:.4}",
        if desc.is_empty() { String::new() } else { format!("{} ", desc.join(" ")) },
        key(best)
    ));
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cartesian_enumeration() {
        let dir = tempfile_dir();
        let p = dir.join("grid.ini");
        std::fs::write(&p, "seed = 1\n[grid]\nalpha = 1 | 5 | 9\namssfe.beta = 1 | 77\n").unwrap();
        let g = Grid::load(p.to_str().unwrap(), Method::Amssfe).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(
            g.settings(1),
            vec![("amssfe.alpha".into(), "1".into()), ("amssfe.beta".into(), "77".into())]
        );
        let c = g.point(5).unwrap();
        assert_eq!((c.amssfe.expansion.alpha, c.amssfe.expansion.beta), (9.0, 77.0));
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn preset_spans_the_published_ranges() {
        let g = Grid::load(PRESET_AMSSFE, Method::Amssfe).unwrap();
        let a: Vec<f64> = g.axes[0].2.iter().map(|v| v.parse().unwrap()).collect();
        let b: Vec<f64> = g.axes[1].2.iter().map(|v| v.parse().unwrap()).collect();
        assert_eq!((a[0], *a.last().unwrap()), (1.0, 10.0));
        assert_eq!((b[0], *b.last().unwrap()), (1.0, 110.0));
        assert!(Grid::load(PRESET_AMSSFE, Method::Rectify).is_err());
    }

    #[test]
    fn holdout_is_a_fifth() {
        let h = holdout_classes(15, 3).unwrap();
        assert_eq!(h.len(), 3);
        assert_eq!(h, holdout_classes(15, 3).unwrap());
        assert_eq!(holdout_classes(3, 0).unwrap().len(), 1);
        assert!(holdout_classes(2, 0).is_err());
    }

    fn tempfile_dir() -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("zsl-tune-{}-{:?}", std::process::id(), std::thread::current().id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }
}
