//! Cycle-mapping training with adaptive rectification of the semantic space.
//!
//! A single tied weight `W` (`n_sem x d_vis`) encodes visual rows into the
//! semantic space (`s = W x`) and decodes prototypes back (`x̂ = Wᵀ p`). Each
//! epoch nudges seen prototypes toward the centroids of their mapped
//! examples, pulls unseen prototypes toward their nearest seen neighbours,
//! and re-solves the stationarity condition of
//!
//! ```text
//! J(W) = ½‖Xᵀ − PᵀW‖² + α/2 ‖WX − O‖² + β/2 ‖WX − P‖²  (+ ρ/2 ‖W‖²)
//! ```
//!
//! which is the Sylvester equation `LW + WR + M = 0` with `L = PPᵀ (+ρI)`,
//! `R = (α+β)XXᵀ`, `M = −((1+β)P + αO)Xᵀ`. Here `X` holds one example per
//! column and `P`, `O` hold the prototype/centroid of each example's class.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Result, ZslError};
use crate::eval;
use crate::io::{self, Manifest};
use crate::linalg::{self, SylvesterProblem};
use crate::matrix::{self, Matrix};
use crate::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct RectifyParams {
    /// Weight of the centroid (global distribution) regularizer.
    pub alpha: f64,
    /// Weight of the relaxed `WX = P` constraint.
    pub beta: f64,
    pub lambda1: f64,
    pub gamma1: f64,
    pub lambda2: f64,
    pub gamma2: f64,
    pub k_neighbors: usize,
    pub max_epochs: usize,
    pub conv_tol: f64,
    /// Tikhonov weight on `W`; zero reproduces the plain objective.
    pub ridge: f64,
}

impl Default for RectifyParams {
    fn default() -> Self {
        RectifyParams {
            alpha: 0.1,
            beta: 1.0,
            lambda1: 0.75,
            gamma1: 0.25,
            lambda2: 0.8,
            gamma2: 0.2,
            k_neighbors: 12,
            max_epochs: 50,
            conv_tol: 1e-6,
            ridge: 0.0,
        }
    }
}

const MIXING_TOL: f64 = 1e-9;

impl RectifyParams {
    pub fn validate(&self, num_seen: usize) -> Result<()> {
        let bad = |m: String| Err(ZslError::InvalidParam(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if (self.lambda1 + self.gamma1 - 1.0).abs() > MIXING_TOL {
            return bad(format!(
                "lambda1 + gamma1 must equal 1, got {} + {}",
                self.lambda1, self.gamma1
            ));
        }
        if (self.lambda2 + self.gamma2 - 1.0).abs() > MIXING_TOL {
            return bad(format!(
                "lambda2 + gamma2 must equal 1, got {} + {}",
                self.lambda2, self.gamma2
            ));
        }
        if self.k_neighbors == 0 || self.k_neighbors > num_seen {
            return bad(format!(
                "k_neighbors = {} must lie in 1..={num_seen}",
                self.k_neighbors
            ));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if !(self.conv_tol > 0.0) {
            return bad("conv_tol must be > 0".into());
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad("ridge must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifyModel {
    /// Tied weight, `n_sem x d_vis`.
    pub w: Matrix,
    pub p_seen_adj: Matrix,
    pub p_unseen_adj: Matrix,
    /// Objective after the initial solve, then after every epoch.
    pub history: Vec<f64>,
    pub epochs_run: usize,
    pub params: RectifyParams,
}

/// Maps visual rows into the semantic space: row `i` is `W x_i`.
pub fn map_to_semantic(w: &Matrix, x_rows: &Matrix) -> Matrix {
    x_rows * w.transpose()
}

/// Row `i` is the mean of the rows of `s_mapped` labelled `i`.
pub fn class_centroids(s_mapped: &Matrix, labels: &[usize], m: usize) -> Result<Matrix> {
    if labels.len() != s_mapped.nrows() {
        return Err(ZslError::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            s_mapped.nrows()
        )));
    }
    let mut sums = DMatrix::<f64>::zeros(m, s_mapped.ncols());
    let mut counts = vec![0usize; m];
    for (i, &c) in labels.iter().enumerate() {
        if c >= m {
            return Err(ZslError::InvalidParam(format!("label {c} outside 0..{m}")));
        }
        let mut row = sums.row_mut(c);
        row += s_mapped.row(i);
        counts[c] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(ZslError::EmptyClass(c));
        }
        sums.row_mut(c).scale_mut(1.0 / n as f64);
    }
    Ok(sums)
}

/// `p_i ← λ1 p_i + γ1 · centroid_i`.
pub fn adjust_seen_prototypes(
    p_seen: &Matrix,
    s_mapped: &Matrix,
    labels: &[usize],
    lambda1: f64,
    gamma1: f64,
) -> Result<Matrix> {
    let centroids = class_centroids(s_mapped, labels, p_seen.nrows())?;
    if centroids.ncols() != p_seen.ncols() {
        return Err(ZslError::Shape(format!(
            "mapped width {} vs prototype width {}",
            centroids.ncols(),
            p_seen.ncols()
        )));
    }
    Ok(p_seen * lambda1 + centroids * gamma1)
}

/// `p_i ← λ2 p_i + γ2 Σ_j w_j p_j` over the `k` cosine-nearest seen
/// prototypes, with `w_j` the similarities normalized by their sum.
pub fn adjust_unseen_prototypes(
    p_unseen: &Matrix,
    p_seen: &Matrix,
    k: usize,
    lambda2: f64,
    gamma2: f64,
) -> Result<Matrix> {
    if k == 0 || k > p_seen.nrows() {
        return Err(ZslError::InvalidParam(format!(
            "k = {k} must lie in 1..={}",
            p_seen.nrows()
        )));
    }
    let sims = linalg::cosine_matrix(p_unseen, p_seen)?;
    let ranked = eval::nearest_prototypes(p_unseen, p_seen, k)?;
    let mut out = p_unseen * lambda2;
    for (i, nbrs) in ranked.iter().enumerate() {
        let total: f64 = nbrs.iter().map(|&j| sims[(i, j)]).sum();
        if total <= 0.0 {
            return Err(ZslError::DegenerateNeighborhood(i));
        }
        let mut row = out.row_mut(i);
        for &j in nbrs {
            row += p_seen.row(j) * (gamma2 * sims[(i, j)] / total);
        }
    }
    Ok(out)
}

/// Builds `L`, `R`, `M` from row-convention inputs: `x_rows` is `N x d`,
/// `p_dup`/`o_dup` are `N x n` with row `j` holding example `j`'s class
/// prototype/centroid.
pub fn assemble_sylvester(
    x_rows: &Matrix,
    p_dup: &Matrix,
    o_dup: &Matrix,
    alpha: f64,
    beta: f64,
) -> Result<SylvesterProblem> {
    assemble_sylvester_ridge(x_rows, p_dup, o_dup, alpha, beta, 0.0)
}

pub fn assemble_sylvester_ridge(
    x_rows: &Matrix,
    p_dup: &Matrix,
    o_dup: &Matrix,
    alpha: f64,
    beta: f64,
    ridge: f64,
) -> Result<SylvesterProblem> {
    let n_ex = x_rows.nrows();
    if p_dup.nrows() != n_ex || o_dup.nrows() != n_ex {
        return Err(ZslError::Shape(format!(
            "X has {n_ex} examples, P has {}, O has {}",
            p_dup.nrows(),
            o_dup.nrows()
        )));
    }
    if p_dup.ncols() != o_dup.ncols() {
        return Err(ZslError::Shape(format!(
            "P width {} vs O width {}",
            p_dup.ncols(),
            o_dup.ncols()
        )));
    }
    let mut l = p_dup.transpose() * p_dup;
    if ridge > 0.0 {
        for i in 0..l.nrows() {
            l[(i, i)] += ridge;
        }
    }
    let r = (x_rows.transpose() * x_rows) * (alpha + beta);
    let target = p_dup * (1.0 + beta) + o_dup * alpha;
    let m = -(target.transpose() * x_rows);
    SylvesterProblem::new(l, r, m)
}

/// The relaxed objective (with the ½ factors), rows convention as in
/// [`assemble_sylvester`].
pub fn objective(
    w: &Matrix,
    x_rows: &Matrix,
    p_dup: &Matrix,
    o_dup: &Matrix,
    alpha: f64,
    beta: f64,
    ridge: f64,
) -> f64 {
    let recon = x_rows - p_dup * w;
    let mapped = map_to_semantic(w, x_rows);
    0.5 * recon.norm_squared()
        + 0.5 * alpha * (&mapped - o_dup).norm_squared()
        + 0.5 * beta * (&mapped - p_dup).norm_squared()
        + 0.5 * ridge * w.norm_squared()
}

/// Analytic `∂J/∂W = −P(Xᵀ − PᵀW) + α(WX − O)Xᵀ + β(WX − P)Xᵀ (+ ρW)`.
pub fn objective_gradient(
    w: &Matrix,
    x_rows: &Matrix,
    p_dup: &Matrix,
    o_dup: &Matrix,
    alpha: f64,
    beta: f64,
    ridge: f64,
) -> Matrix {
    let recon = x_rows - p_dup * w;
    let mapped = map_to_semantic(w, x_rows);
    let mut g = -(p_dup.transpose() * recon)
        + ((&mapped - o_dup) * alpha + (&mapped - p_dup) * beta).transpose() * x_rows;
    if ridge > 0.0 {
        g += w * ridge;
    }
    g
}

fn duplicate(rows: &Matrix, labels: &[usize]) -> Matrix {
    matrix::select_rows(rows, labels)
}

fn solve_epoch(
    x: &Matrix,
    p_dup: &Matrix,
    o_dup: &Matrix,
    alpha: f64,
    params: &RectifyParams,
) -> Result<Matrix> {
    let problem = assemble_sylvester_ridge(x, p_dup, o_dup, alpha, params.beta, params.ridge)?;
    let w = linalg::solve_sylvester(&problem)?;
    let res = problem.relative_residual(&w);
    if res > 1e-8 {
        log::warn!("Sylvester relative residual {res:e} exceeds 1e-8");
    }
    Ok(w)
}

/// Alternating training: initial cycle-mapping solve, then per epoch adjust
/// seen prototypes, adjust unseen prototypes, recompute centroids and
/// re-solve, until the relative objective change drops below `conv_tol`.
pub fn train(ds: &Dataset, params: &RectifyParams) -> Result<RectifyModel> {
    params.validate(ds.num_seen())?;
    let x = &ds.x_train;
    let labels = ds.train_local_labels();
    let m = ds.num_seen();

    // Initialization: the cycle mapping with the relaxed constraint only.
    let mut p_seen = ds.p_seen.clone();
    let mut p_unseen = ds.p_unseen.clone();
    let p_dup = duplicate(&p_seen, &labels);
    let w0 = solve_epoch(x, &p_dup, &p_dup, 0.0, params)?;
    let mut w = w0;
    let j0 = objective(&w, x, &p_dup, &p_dup, 0.0, params.beta, params.ridge);
    if !j0.is_finite() {
        return Err(ZslError::Numerical("non-finite objective after initialization".into()));
    }
    let mut history = vec![j0];
    let mut epochs_run = 0;

    for epoch in 0..params.max_epochs {
        let mapped = map_to_semantic(&w, x);
        p_seen = adjust_seen_prototypes(&p_seen, &mapped, &labels, params.lambda1, params.gamma1)?;
        // Anchored on the predefined unseen prototypes: re-mixing the
        // previous epoch's output would shrink their weight as lambda2^t.
        p_unseen = adjust_unseen_prototypes(
            &ds.p_unseen,
            &p_seen,
            params.k_neighbors,
            params.lambda2,
            params.gamma2,
        )?;
        let centroids = class_centroids(&mapped, &labels, m)?;
        let p_dup = duplicate(&p_seen, &labels);
        let o_dup = duplicate(&centroids, &labels);
        w = solve_epoch(x, &p_dup, &o_dup, params.alpha, params)?;
        let j = objective(&w, x, &p_dup, &o_dup, params.alpha, params.beta, params.ridge);
        if !j.is_finite() {
            return Err(ZslError::Numerical(format!("non-finite objective at epoch {epoch}")));
        }
        let prev = *history.last().unwrap();
        history.push(j);
        epochs_run = epoch + 1;
        let change = (j - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
        log::debug!("rectify epoch {epochs_run}: J = {j:.6e} (rel change {change:.3e})");
        if change < params.conv_tol {
            break;
        }
    }

    Ok(RectifyModel {
        w,
        p_seen_adj: p_seen,
        p_unseen_adj: p_unseen,
        history,
        epochs_run,
        params: params.clone(),
    })
}

/// Visual → semantic inference: rank `prototypes` rows for each mapped test row.
pub fn infer_v2s(model: &RectifyModel, x_test: &Matrix, prototypes: &Matrix, k: usize) -> Result<Vec<Vec<usize>>> {
    if x_test.ncols() != model.w.ncols() {
        return Err(ZslError::Shape(format!(
            "test width {} vs model visual width {}",
            x_test.ncols(),
            model.w.ncols()
        )));
    }
    let s = map_to_semantic(&model.w, x_test);
    eval::nearest_prototypes(&s, prototypes, k)
}

/// Semantic → visual inference: decode each prototype into a visual template
/// `Wᵀ p` and rank templates for each test row.
pub fn infer_s2v(model: &RectifyModel, x_test: &Matrix, prototypes: &Matrix, k: usize) -> Result<Vec<Vec<usize>>> {
    if prototypes.ncols() != model.w.nrows() {
        return Err(ZslError::Shape(format!(
            "prototype width {} vs model semantic width {}",
            prototypes.ncols(),
            model.w.nrows()
        )));
    }
    let templates = prototypes * &model.w;
    eval::nearest_prototypes(x_test, &templates, k)
}

pub const W_FILE: &str = "W.zslm";
pub const P_SEEN_ADJ_FILE: &str = "P_seen_adj.zslm";
pub const P_UNSEEN_ADJ_FILE: &str = "P_unseen_adj.zslm";
pub const MANIFEST_FILE: &str = "manifest.txt";

impl RectifyModel {
    pub fn manifest(&self) -> Manifest {
        let p = &self.params;
        let mut m = Manifest::new();
        m.set("method", "rectify")
            .set("alpha", p.alpha)
            .set("beta", p.beta)
            .set("lambda1", p.lambda1)
            .set("gamma1", p.gamma1)
            .set("lambda2", p.lambda2)
            .set("gamma2", p.gamma2)
            .set("k_neighbors", p.k_neighbors)
            .set("max_epochs", p.max_epochs)
            .set("conv_tol", p.conv_tol)
            .set("ridge", p.ridge)
            .set("epochs_run", self.epochs_run)
            .set("final_objective", format!("{:?}", self.history.last().copied().unwrap_or(f64::NAN)))
            .set("visual_dim", self.w.ncols())
            .set("semantic_dim", self.w.nrows());
        m
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| ZslError::io(dir, e))?;
        io::save_matrix_binary(&self.w, dir.join(W_FILE))?;
        io::save_matrix_binary(&self.p_seen_adj, dir.join(P_SEEN_ADJ_FILE))?;
        io::save_matrix_binary(&self.p_unseen_adj, dir.join(P_UNSEEN_ADJ_FILE))?;
        self.manifest().save(dir.join(MANIFEST_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let man = Manifest::load(dir.join(MANIFEST_FILE))?;
        if man.get("method") != Some("rectify") {
            return Err(ZslError::InvalidParam("bundle is not a rectify model".into()));
        }
        let params = RectifyParams {
            alpha: man.parse_value("alpha")?,
            beta: man.parse_value("beta")?,
            lambda1: man.parse_value("lambda1")?,
            gamma1: man.parse_value("gamma1")?,
            lambda2: man.parse_value("lambda2")?,
            gamma2: man.parse_value("gamma2")?,
            k_neighbors: man.parse_value("k_neighbors")?,
            max_epochs: man.parse_value("max_epochs")?,
            conv_tol: man.parse_value("conv_tol")?,
            ridge: man.parse_value("ridge")?,
        };
        let final_objective: f64 = man.parse_value("final_objective")?;
        Ok(RectifyModel {
            w: io::load_matrix_binary(dir.join(W_FILE))?,
            p_seen_adj: io::load_matrix_binary(dir.join(P_SEEN_ADJ_FILE))?,
            p_unseen_adj: io::load_matrix_binary(dir.join(P_UNSEEN_ADJ_FILE))?,
            history: vec![final_objective],
            epochs_run: man.parse_value("epochs_run")?,
            params,
        })
    }
}
