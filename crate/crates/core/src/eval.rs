//! Ranking and metrics shared by every pipeline.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Result, ZslError};
use crate::io::Manifest;
use crate::linalg;
use crate::matrix::Matrix;

/// Top-`k` row indices of `p` for every row of `s`, by descending cosine
/// similarity with ties broken by ascending index.
pub fn nearest_prototypes(s: &Matrix, p: &Matrix, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > p.nrows() {
        return Err(ZslError::InvalidParam(format!(
            "k = {k} must lie in 1..={}",
            p.nrows()
        )));
    }
    let sims = linalg::cosine_matrix(s, p)?;
    Ok((0..s.nrows())
        .map(|i| {
            let mut idx: Vec<usize> = (0..p.nrows()).collect();
            idx.sort_by(|&a, &b| sims[(i, b)].total_cmp(&sims[(i, a)]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect())
}

/// Maps ranked row indices through a class-id table.
pub fn to_class_ids(ranked: &[Vec<usize>], ids: &[usize]) -> Vec<Vec<usize>> {
    ranked
        .iter()
        .map(|r| r.iter().map(|&i| ids[i]).collect())
        .collect()
}

/// Fraction of examples whose truth appears among the first `k` entries.
pub fn hit_at_k(topk: &[Vec<usize>], truths: &[usize], k: usize) -> Result<f64> {
    if topk.len() != truths.len() {
        return Err(ZslError::Shape(format!(
            "{} ranked lists for {} truths",
            topk.len(),
            truths.len()
        )));
    }
    if topk.is_empty() {
        return Err(ZslError::InvalidParam("hit@k over an empty set".into()));
    }
    if let Some(i) = topk.iter().position(|l| l.len() < k) {
        return Err(ZslError::InvalidParam(format!(
            "ranked list {i} has {} entries, fewer than k = {k}",
            topk[i].len()
        )));
    }
    let hits = topk
        .iter()
        .zip(truths)
        .filter(|(list, t)| list[..k].contains(t))
        .count();
    Ok(hits as f64 / truths.len() as f64)
}

/// `2US/(U+S)`, zero when both are zero.
pub fn harmonic_mean(u: f64, s: f64) -> f64 {
    if u + s == 0.0 {
        0.0
    } else {
        2.0 * u * s / (u + s)
    }
}

/// Per-class accuracy over `classes`; classes without test examples are absent.
pub fn per_class_accuracy(
    preds: &[usize],
    truths: &[usize],
    classes: &[usize],
) -> BTreeMap<usize, f64> {
    let mut correct: BTreeMap<usize, usize> = BTreeMap::new();
    let mut total: BTreeMap<usize, usize> = BTreeMap::new();
    for (&p, &t) in preds.iter().zip(truths) {
        if !classes.contains(&t) {
            continue;
        }
        *total.entry(t).or_default() += 1;
        if p == t {
            *correct.entry(t).or_default() += 1;
        }
    }
    total
        .into_iter()
        .map(|(c, n)| (c, correct.get(&c).copied().unwrap_or(0) as f64 / n as f64))
        .collect()
}

pub fn macro_mean(per_class: &BTreeMap<usize, f64>) -> f64 {
    if per_class.is_empty() {
        return 0.0;
    }
    per_class.values().sum::<f64>() / per_class.len() as f64
}

/// Row-normalized confusion matrix; rows are truths, columns predictions,
/// both in the order of `classes`. Predictions outside `classes` are dropped
/// from the counts but still count toward the row total.
pub fn confusion_matrix(preds: &[usize], truths: &[usize], classes: &[usize]) -> Matrix {
    let c = classes.len();
    let pos = |x: usize| classes.iter().position(|&k| k == x);
    let mut counts = DMatrix::<f64>::zeros(c, c);
    let mut totals = vec![0usize; c];
    for (&p, &t) in preds.iter().zip(truths) {
        let Some(ti) = pos(t) else { continue };
        totals[ti] += 1;
        if let Some(pi) = pos(p) {
            counts[(ti, pi)] += 1.0;
        }
    }
    for (i, &n) in totals.iter().enumerate() {
        if n > 0 {
            counts.row_mut(i).scale_mut(1.0 / n as f64);
        }
    }
    counts
}

/// Writes a label column followed by the coordinate columns, with header.
pub fn export_embeddings_csv(s: &Matrix, labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if labels.len() != s.nrows() {
        return Err(ZslError::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            s.nrows()
        )));
    }
    let mut out = String::from("label");
    for j in 0..s.ncols() {
        out.push_str(&format!(",c{j}"));
    }
    out.push('\n');
    for (i, row) in s.row_iter().enumerate() {
        out.push_str(&labels[i].to_string());
        for v in row.iter() {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| ZslError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Czsl,
    Gzsl,
}

impl std::str::FromStr for Scope {
    type Err = ZslError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "czsl" => Ok(Scope::Czsl),
            "gzsl" => Ok(Scope::Gzsl),
            other => Err(ZslError::InvalidParam(format!(
                "scope must be czsl or gzsl, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scope::Czsl => "czsl",
            Scope::Gzsl => "gzsl",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GzslScores {
    pub unseen: f64,
    pub seen: f64,
    pub harmonic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub hit_at_k: BTreeMap<usize, f64>,
    pub per_class: BTreeMap<usize, f64>,
    /// Macro (per-class averaged) top-1 accuracy.
    pub macro_accuracy: f64,
    pub confusion: Matrix,
    pub classes: Vec<usize>,
    pub gzsl: Option<GzslScores>,
}

impl EvalReport {
    /// Builds a report from class-id rankings. `ks` are the hit@k cutoffs;
    /// `classes` is the label space the rankings were drawn from. When
    /// `seen`/`unseen` split lists are given the GZSL triple is filled in.
    pub fn from_rankings(
        ranked: &[Vec<usize>],
        truths: &[usize],
        ks: &[usize],
        classes: &[usize],
        split: Option<(&[usize], &[usize])>,
    ) -> Result<Self> {
        let mut hit = BTreeMap::new();
        for &k in ks {
            hit.insert(k, hit_at_k(ranked, truths, k)?);
        }
        let preds: Vec<usize> = ranked.iter().map(|r| r[0]).collect();
        let per_class = per_class_accuracy(&preds, truths, classes);
        let gzsl = split.map(|(seen, unseen)| {
            let u = macro_mean(&per_class_accuracy(&preds, truths, unseen));
            let s = macro_mean(&per_class_accuracy(&preds, truths, seen));
            GzslScores {
                unseen: u,
                seen: s,
                harmonic: harmonic_mean(u, s),
            }
        });
        Ok(EvalReport {
            hit_at_k: hit,
            macro_accuracy: macro_mean(&per_class),
            per_class,
            confusion: confusion_matrix(&preds, truths, classes),
            classes: classes.to_vec(),
            gzsl,
        })
    }

    /// Key=value report. `prefix` namespaces the keys (e.g. "v2s.").
    pub fn write_into(&self, m: &mut Manifest, prefix: &str) {
        for (k, v) in &self.hit_at_k {
            m.set(&format!("{prefix}hit@{k}"), format!("{v:.6}"));
        }
        m.set(&format!("{prefix}macro_acc"), format!("{:.6}", self.macro_accuracy));
        for (c, v) in &self.per_class {
            m.set(&format!("{prefix}class.{c}"), format!("{v:.6}"));
        }
        if let Some(g) = &self.gzsl {
            m.set(&format!("{prefix}U"), format!("{:.6}", g.unseen));
            m.set(&format!("{prefix}S"), format!("{:.6}", g.seen));
            m.set(&format!("{prefix}H"), format!("{:.6}", g.harmonic));
        }
    }

    /// One metric per line, for terminal output.
    pub fn summary_lines(&self, prefix: &str) -> Vec<String> {
        let mut out: Vec<String> = self
            .hit_at_k
            .iter()
            .map(|(k, v)| format!("{prefix}hit@{k}={v:.4}"))
            .collect();
        out.push(format!("{prefix}macro_acc={:.4}", self.macro_accuracy));
        if let Some(g) = &self.gzsl {
            out.push(format!("{prefix}U={:.4}", g.unseen));
            out.push(format!("{prefix}S={:.4}", g.seen));
            out.push(format!("{prefix}H={:.4}", g.harmonic));
        }
        out
    }

    pub fn save_confusion_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let header: Vec<String> = self.classes.iter().map(|c| format!("pred_{c}")).collect();
        crate::io::save_matrix_csv(&self.confusion, path, Some(&header))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::from_rows;

    #[test]
    fn hit_at_k_boundaries() {
        let perfect = vec![vec![0, 1], vec![1, 0]];
        assert_eq!(hit_at_k(&perfect, &[0, 1], 1).unwrap(), 1.0);
        assert_eq!(hit_at_k(&perfect, &[0, 1], 2).unwrap(), 1.0);
        let second = vec![vec![1, 0], vec![0, 1]];
        assert_eq!(hit_at_k(&second, &[0, 1], 1).unwrap(), 0.0);
        assert_eq!(hit_at_k(&second, &[0, 1], 2).unwrap(), 1.0);
        assert!(hit_at_k(&second, &[0, 1], 3).is_err());
    }

    #[test]
    fn harmonic_cases() {
        assert_eq!(harmonic_mean(0.5, 0.5), 0.5);
        assert_eq!(harmonic_mean(0.0, 0.7), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        let h = harmonic_mean(42.8, 69.7);
        assert_eq!(format!("{h:.1}"), "53.0");
    }

    #[test]
    fn per_class_two_classes() {
        let acc = per_class_accuracy(&[0, 0, 0, 0], &[0, 0, 1, 1], &[0, 1]);
        assert_eq!(acc[&0], 1.0);
        assert_eq!(acc[&1], 0.0);
        assert_eq!(macro_mean(&acc), 0.5);
        // class 2 has no examples and is absent
        let acc = per_class_accuracy(&[0], &[0], &[0, 2]);
        assert_eq!(acc.len(), 1);
    }

    #[test]
    fn confusion_identity_and_diagonal() {
        let c = confusion_matrix(&[3, 4, 5], &[3, 4, 5], &[3, 4, 5]);
        assert_eq!(c, DMatrix::identity(3, 3));
        let preds = [0, 1, 1, 2, 0, 2];
        let truths = [0, 0, 1, 2, 2, 2];
        let c = confusion_matrix(&preds, &truths, &[0, 1, 2]);
        let acc = per_class_accuracy(&preds, &truths, &[0, 1, 2]);
        for (i, k) in [0, 1, 2].iter().enumerate() {
            assert_eq!(c[(i, i)], acc[k]);
            assert!((c.row(i).sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn nearest_exact_match_and_ties() {
        let p = from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap();
        let s = from_rows(&[vec![0.0, 3.0], vec![5.0, 0.0]]).unwrap();
        let r = nearest_prototypes(&s, &p, 3).unwrap();
        assert_eq!(r[0][0], 1);
        // rows 0 and 2 tie on cosine; ascending index wins
        assert_eq!(r[1], vec![0, 2, 1]);
        assert!(nearest_prototypes(&s, &p, 4).is_err());
    }

    #[test]
    fn nearest_rejects_zero_rows() {
        let p = from_rows(&[vec![1.0, 0.0]]).unwrap();
        let s = from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(nearest_prototypes(&s, &p, 1), Err(ZslError::ZeroNorm(_))));
    }

    #[test]
    fn report_gzsl_triple() {
        let ranked = vec![vec![0], vec![1], vec![0], vec![2]];
        let truths = [0, 1, 2, 2];
        let r = EvalReport::from_rankings(&ranked, &truths, &[1], &[0, 1, 2], Some((&[0, 1], &[2]))).unwrap();
        let g = r.gzsl.unwrap();
        assert_eq!(g.seen, 1.0);
        assert_eq!(g.unseen, 0.5);
        assert!((g.harmonic - 2.0 / 3.0).abs() < 1e-15);
    }
}
