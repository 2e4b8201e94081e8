//! Semantic feature expansion aligned to an embedded manifold of the visual
//! space.
//!
//! Seen-class visual centres are embedded by classical MDS into `n + k`
//! coordinates (`O`). A VAE trained on visual rows supplies `k` auxiliary
//! semantic features per example; the combined vector
//! `concat(p_y, z)` is pulled toward `o_y` by a cosine alignment term. The
//! recognition mapping is a linear autoencoder whose hidden layer is tied to
//! the combined prototypes.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, ZslError};
use crate::eval::{self, Scope};
use crate::io::{self, Manifest};
use crate::linalg;
use crate::matrix::{self, Matrix};
use crate::nn::{self, AdamConfig, AdamState, Dense, VaeGrads, VaeModel, VaeSpec};
use crate::rectify;
use crate::Dataset;

/// Row `i` is the mean visual row of seen class `i`.
pub fn class_centers_visual(x: &Matrix, labels: &[usize], m: usize) -> Result<Matrix> {
    rectify::class_centroids(x, labels, m)
}

/// `b_ij = −½(d²_ij − d²_i· − d²_·j + d²_··)`, the Gram matrix of points
/// whose pairwise distances are `D`, centred at their mean.
pub fn double_center(d: &Matrix) -> Result<Matrix> {
    if !d.is_square() {
        return Err(ZslError::Shape(format!("distance matrix is {:?}", d.shape())));
    }
    let m = d.nrows();
    let d2 = d.map(|v| v * v);
    let row_means: Vec<f64> = (0..m).map(|i| d2.row(i).sum() / m as f64).collect();
    let col_means: Vec<f64> = (0..m).map(|j| d2.column(j).sum() / m as f64).collect();
    let grand = d2.sum() / (m * m) as f64;
    Ok(DMatrix::from_fn(m, m, |i, j| {
        -0.5 * (d2[(i, j)] - row_means[i] - col_means[j] + grand)
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedManifold {
    /// One row per seen class.
    pub o: Matrix,
    pub target_dim: usize,
    /// Retained eigenvalues, descending, after clamping.
    pub spectrum: Vec<f64>,
}

/// Classical MDS of a distance matrix into `target_dim` coordinates.
pub fn extract_embedded_manifold(d: &Matrix, target_dim: usize) -> Result<EmbeddedManifold> {
    let m = d.nrows();
    if target_dim == 0 || target_dim + 1 > m {
        return Err(ZslError::InvalidParam(format!(
            "target_dim {target_dim} must lie in 1..={}",
            m.saturating_sub(1)
        )));
    }
    if !d.is_square() {
        return Err(ZslError::Shape(format!("distance matrix is {:?}", d.shape())));
    }
    for i in 0..m {
        if d[(i, i)] != 0.0 {
            return Err(ZslError::InvalidParam(format!("distance diagonal {i} is nonzero")));
        }
        for j in 0..m {
            if !(d[(i, j)] >= 0.0) {
                return Err(ZslError::InvalidParam(format!("negative distance at ({i}, {j})")));
            }
        }
    }
    let b = double_center(d)?;
    let eig = linalg::sym_eig(&b)?;
    let mut clamped = 0.0;
    let spectrum: Vec<f64> = eig.eigenvalues[..target_dim]
        .iter()
        .map(|&l| {
            if l < 0.0 {
                clamped -= l;
                0.0
            } else {
                l
            }
        })
        .collect();
    if clamped > 0.0 {
        log::warn!("MDS clamped {clamped:e} of negative spectrum to zero");
    }
    let o = DMatrix::from_fn(m, target_dim, |i, t| eig.eigenvectors[(i, t)] * spectrum[t].sqrt());
    Ok(EmbeddedManifold {
        o,
        target_dim,
        spectrum,
    })
}

/// `Σ_i (1 − cos(S_i, o_{y_i}))` and its gradient with respect to `S`.
pub fn alignment_loss(s: &Matrix, o: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if s.ncols() != o.ncols() {
        return Err(ZslError::Shape(format!(
            "combined width {} vs manifold width {}",
            s.ncols(),
            o.ncols()
        )));
    }
    if labels.len() != s.nrows() {
        return Err(ZslError::Shape(format!("{} labels for {} rows", labels.len(), s.nrows())));
    }
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(s.nrows(), s.ncols());
    for (i, &y) in labels.iter().enumerate() {
        if y >= o.nrows() {
            return Err(ZslError::InvalidDataset(format!("label {y} outside 0..{}", o.nrows())));
        }
        let si = s.row(i);
        let oy = o.row(y);
        let ns = si.norm();
        let no = oy.norm();
        if ns == 0.0 {
            return Err(ZslError::ZeroNorm(format!("combined row {i}")));
        }
        if no == 0.0 {
            return Err(ZslError::ZeroNorm(format!("manifold row {y}")));
        }
        let cos = si.dot(&oy) / (ns * no);
        loss += 1.0 - cos;
        // d(1 − cos)/ds = −(o/(‖s‖‖o‖) − cos·s/‖s‖²)
        let g = si * (cos / (ns * ns)) - oy / (ns * no);
        grad.row_mut(i).copy_from(&g);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionParams {
    /// Expansion width; `None` picks `round(0.6 · n)`.
    pub k: Option<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub g_neighbors: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop when the epoch loss has not improved by `min_delta` (relative)
    /// for this many epochs; 0 disables early stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for ExpansionParams {
    fn default() -> Self {
        ExpansionParams {
            k: None,
            alpha: 9.0,
            beta: 77.0,
            g_neighbors: 8,
            hidden: vec![1024, 256],
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            patience: 10,
            min_delta: 1e-4,
            seed: 0,
        }
    }
}

pub fn default_expansion_width(n: usize) -> usize {
    ((0.6 * n as f64).round() as usize).max(1)
}

impl ExpansionParams {
    pub fn resolved_k(&self, n: usize) -> usize {
        self.k.unwrap_or_else(|| default_expansion_width(n))
    }

    pub fn validate(&self, num_seen: usize) -> Result<()> {
        let bad = |m: String| Err(ZslError::InvalidParam(m));
        if self.k == Some(0) {
            return bad("k must be >= 1".into());
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.g_neighbors == 0 || self.g_neighbors > num_seen {
            return bad(format!("g_neighbors = {} must lie in 1..={num_seen}", self.g_neighbors));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be a non-empty list of positive counts".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.min_delta >= 0.0) {
            return bad("min_delta must be >= 0".into());
        }
        Ok(())
    }
}

/// Per-epoch means over examples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionEpoch {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub alignment: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionModel {
    pub vae: VaeModel,
    pub manifold: EmbeddedManifold,
    pub p_seen_combined: Matrix,
    pub p_unseen_combined: Matrix,
    pub alpha: f64,
    pub beta: f64,
    pub g_neighbors: usize,
    pub history: Vec<ExpansionEpoch>,
}

impl ExpansionModel {
    pub fn k(&self) -> usize {
        self.vae.latent
    }
}

/// MDS of the seen visual centres into `width` coordinates. At most `m − 1`
/// coordinates carry information, so any excess columns are zero.
pub fn visual_manifold(ds: &Dataset, width: usize) -> Result<EmbeddedManifold> {
    let m = ds.num_seen();
    if m < 2 {
        return Err(ZslError::InvalidDataset("manifold extraction needs >= 2 seen classes".into()));
    }
    let centers = class_centers_visual(&ds.x_train, &ds.train_local_labels(), m)?;
    let d = linalg::pairwise_distances(&centers);
    let inner = width.min(m - 1);
    let mut em = extract_embedded_manifold(&d, inner)?;
    if inner < width {
        em.o = em.o.resize_horizontally(width, 0.0);
        em.spectrum.resize(width, 0.0);
        em.target_dim = width;
    }
    Ok(em)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Trains the expansion VAE under `α·(reconstruction + KL) + β·alignment`,
/// then derives the combined seen and unseen prototypes.
pub fn train_expansion(ds: &Dataset, params: &ExpansionParams) -> Result<ExpansionModel> {
    params.validate(ds.num_seen())?;
    let n = ds.semantic_dim();
    let k = params.resolved_k(n);
    let manifold = visual_manifold(ds, n + k)?;
    let labels = ds.train_local_labels();
    let x = &ds.x_train;
    let mut vae = VaeModel::new(&VaeSpec {
        input_dim: ds.visual_dim(),
        hidden: params.hidden.clone(),
        latent: k,
        seed: params.seed,
    })?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: params.lr,
            ..Default::default()
        },
        &vae.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x00a1_1a9e);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let nf = x.nrows() as f64;

    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut sums = ExpansionEpoch {
            total: 0.0,
            reconstruction: 0.0,
            kl: 0.0,
            alignment: 0.0,
        };
        for batch in order.chunks(params.batch_size) {
            let xb = matrix::select_rows(x, batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let eps = gaussian(batch.len(), k, &mut rng);
            let fwd = vae.forward(&xb, &eps)?;
            let bsz = batch.len() as f64;

            let (rec, mut d_xhat) = nn::sse(fwd.x_hat(), &xb);
            let (kl, mut d_mu, mut d_logvar) = nn::kl_diag_gaussian(&fwd.mu, &fwd.logvar)?;
            let scale_vae = params.alpha / bsz;
            d_xhat *= scale_vae;
            d_mu *= scale_vae;
            d_logvar *= scale_vae;

            let mut align = 0.0;
            let mut d_z = DMatrix::zeros(batch.len(), k);
            if params.beta > 0.0 {
                let p_rows = matrix::select_rows(&ds.p_seen, &yb);
                let combined = matrix::hconcat(&p_rows, &fwd.z)?;
                let (a, g) = alignment_loss(&combined, &manifold.o, &yb)?;
                align = a;
                d_z = g.columns(n, k) * (params.beta / bsz);
            }

            let grads = vae.backward(
                &fwd,
                &VaeGrads {
                    x_hat: Some(&d_xhat),
                    mu: Some(&d_mu),
                    logvar: Some(&d_logvar),
                    z: Some(&d_z),
                },
            )?;
            adam.update(vae.params_mut(), &grads)?;

            let total = params.alpha * (rec + kl) + params.beta * align;
            if !total.is_finite() {
                return Err(ZslError::Numerical(format!("non-finite expansion loss at epoch {epoch}")));
            }
            sums.total += total;
            sums.reconstruction += rec;
            sums.kl += kl;
            sums.alignment += align;
        }
        let ep = ExpansionEpoch {
            total: sums.total / nf,
            reconstruction: sums.reconstruction / nf,
            kl: sums.kl / nf,
            alignment: sums.alignment / nf,
        };
        log::debug!("expansion epoch {}: {ep:?}", epoch + 1);
        history.push(ep);
        if params.patience > 0 {
            if !best.is_finite() || ep.total < best - params.min_delta * best.abs() {
                best = ep.total;
                stale = 0;
            } else {
                stale += 1;
                if stale >= params.patience {
                    break;
                }
            }
        }
    }

    let p_seen_combined = update_seen_prototypes(&vae, ds)?;
    let p_seen_exp = p_seen_combined.columns(n, k).into_owned();
    let p_unseen_combined =
        update_unseen_prototypes(&ds.p_unseen, &ds.p_seen, &p_seen_exp, params.g_neighbors)?;
    Ok(ExpansionModel {
        vae,
        manifold,
        p_seen_combined,
        p_unseen_combined,
        alpha: params.alpha,
        beta: params.beta,
        g_neighbors: params.g_neighbors,
        history,
    })
}

/// `concat(p_c, mean encoder-mu over class c)` for every seen class.
pub fn update_seen_prototypes(vae: &VaeModel, ds: &Dataset) -> Result<Matrix> {
    let (mu, _) = vae.encode(&ds.x_train)?;
    let centers = rectify::class_centroids(&mu, &ds.train_local_labels(), ds.num_seen())?;
    matrix::hconcat(&ds.p_seen, &centers)
}

/// Expands each unseen prototype as the least-squares combination of its
/// `g` cosine-nearest seen prototypes, carried over to their expansions.
pub fn update_unseen_prototypes(
    p_unseen: &Matrix,
    p_seen: &Matrix,
    p_seen_exp: &Matrix,
    g: usize,
) -> Result<Matrix> {
    if p_seen.nrows() != p_seen_exp.nrows() {
        return Err(ZslError::Shape(format!(
            "{} seen prototypes vs {} expansions",
            p_seen.nrows(),
            p_seen_exp.nrows()
        )));
    }
    if g == 0 || g > p_seen.nrows() {
        return Err(ZslError::InvalidParam(format!("g = {g} must lie in 1..={}", p_seen.nrows())));
    }
    let neighbours = eval::nearest_prototypes(p_unseen, p_seen, g)?;
    let mut expanded = DMatrix::zeros(p_unseen.nrows(), p_seen_exp.ncols());
    for (u, nb) in neighbours.iter().enumerate() {
        let stack = matrix::select_rows(p_seen, nb);
        if stack.amax() == 0.0 {
            return Err(ZslError::DegenerateNeighborhood(u));
        }
        // p′ᵀ ≈ stackᵀ θᵀ
        let target = DMatrix::from_column_slice(p_unseen.ncols(), 1, p_unseen.row(u).transpose().as_slice());
        let theta = linalg::least_squares(&stack.transpose(), &target)?;
        let e = theta.transpose() * matrix::select_rows(p_seen_exp, nb);
        expanded.row_mut(u).copy_from(&e);
    }
    matrix::hconcat(p_unseen, &expanded)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingParams {
    pub epochs: usize,
    pub lr: f64,
    /// Weight of the visual reconstruction term against the prototype term.
    pub recon_weight: f64,
    pub seed: u64,
}

impl Default for MappingParams {
    fn default() -> Self {
        MappingParams {
            epochs: 100,
            lr: 1e-4,
            recon_weight: 1.0,
            seed: 0,
        }
    }
}

/// Linear autoencoder `x → h = x W_e + b_e → x̂ = h W_d + b_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAutoencoder {
    pub encoder: Dense,
    pub decoder: Dense,
    /// Mean squared-error loss per epoch.
    pub history: Vec<f64>,
}

fn with_bias_column(x: &Matrix) -> Matrix {
    x.clone().insert_column(x.ncols(), 1.0)
}

fn dense_from_augmented(sol: &Matrix) -> Dense {
    let rows = sol.nrows() - 1;
    Dense {
        weight: sol.rows(0, rows).into_owned(),
        bias: sol.rows(rows, 1).into_owned(),
    }
}

/// Fits the recognition autoencoder with the hidden layer tied to each
/// example's class prototype (`targets` row per class). Both halves start at
/// their least-squares solutions and are refined jointly by Adam on
/// `mean ‖h − s‖² + recon_weight · mean ‖x̂ − x‖²`.
pub fn train_mapping(x: &Matrix, labels: &[usize], targets: &Matrix, params: &MappingParams) -> Result<LinearAutoencoder> {
    if labels.len() != x.nrows() {
        return Err(ZslError::Shape(format!("{} labels for {} rows", labels.len(), x.nrows())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= targets.nrows()) {
        return Err(ZslError::InvalidDataset(format!("label {bad} has no prototype")));
    }
    if !(params.lr > 0.0) || !(params.recon_weight >= 0.0) {
        return Err(ZslError::InvalidParam("mapping lr must be > 0 and recon_weight >= 0".into()));
    }
    let s = matrix::select_rows(targets, labels);
    let encoder = dense_from_augmented(&linalg::least_squares(&with_bias_column(x), &s)?);
    let decoder = dense_from_augmented(&linalg::least_squares(&with_bias_column(&s), x)?);
    let mut ae = LinearAutoencoder {
        encoder,
        decoder,
        history: Vec::with_capacity(params.epochs),
    };
    let mut adam = AdamState::new(
        AdamConfig {
            lr: params.lr,
            ..Default::default()
        },
        &ae.params(),
    );
    let nf = x.nrows() as f64;
    for epoch in 0..params.epochs {
        let h = ae.encoder.forward(x);
        let x_hat = ae.decoder.forward(&h);
        let (ls, gs) = nn::sse(&h, &s);
        let (lr_, gr) = nn::sse(&x_hat, x);
        let loss = (ls + params.recon_weight * lr_) / nf;
        if !loss.is_finite() {
            return Err(ZslError::Numerical(format!("non-finite mapping loss at epoch {epoch}")));
        }
        ae.history.push(loss);
        let gr = gr * (params.recon_weight / nf);
        let (dwd, dbd, dh) = ae.decoder.backward(&h, &gr);
        let (dwe, dbe, _) = ae.encoder.backward(x, &(gs / nf + dh));
        adam.update(ae.params_mut(), &[dwe, dbe, dwd, dbd])?;
    }
    Ok(ae)
}

impl LinearAutoencoder {
    pub fn params(&self) -> Vec<&Matrix> {
        vec![
            &self.encoder.weight,
            &self.encoder.bias,
            &self.decoder.weight,
            &self.decoder.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.encoder.weight,
            &mut self.encoder.bias,
            &mut self.decoder.weight,
            &mut self.decoder.bias,
        ]
    }

    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.encoder.in_width() {
            return Err(ZslError::Shape(format!(
                "input width {} vs encoder width {}",
                x.ncols(),
                self.encoder.in_width()
            )));
        }
        Ok(self.encoder.forward(x))
    }

    pub fn reconstruct(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.decoder.forward(&self.encode(x)?))
    }
}

/// Ranks prototype rows by cosine similarity to the encoded test rows.
/// With [`Scope::Gzsl`] the seen prototypes come first in the index space.
pub fn recognize(
    mapping: &LinearAutoencoder,
    x: &Matrix,
    p_seen: &Matrix,
    p_unseen: &Matrix,
    scope: Scope,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let s = mapping.encode(x)?;
    match scope {
        Scope::Czsl => eval::nearest_prototypes(&s, p_unseen, k),
        Scope::Gzsl => eval::nearest_prototypes(&s, &matrix::vconcat(p_seen, p_unseen)?, k),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmssfeParams {
    pub expansion: ExpansionParams,
    pub mapping: MappingParams,
}

impl Default for AmssfeParams {
    fn default() -> Self {
        AmssfeParams {
            expansion: ExpansionParams::default(),
            mapping: MappingParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmssfeModel {
    pub expansion: ExpansionModel,
    pub mapping: LinearAutoencoder,
}

/// Expansion followed by the recognition mapping onto combined prototypes.
pub fn train(ds: &Dataset, params: &AmssfeParams) -> Result<AmssfeModel> {
    let expansion = train_expansion(ds, &params.expansion)?;
    let mapping = train_mapping(
        &ds.x_train,
        &ds.train_local_labels(),
        &expansion.p_seen_combined,
        &params.mapping,
    )?;
    Ok(AmssfeModel { expansion, mapping })
}

/// The same recognition mapping fitted to the predefined prototypes only.
pub fn train_baseline(ds: &Dataset, params: &MappingParams) -> Result<LinearAutoencoder> {
    train_mapping(&ds.x_train, &ds.train_local_labels(), &ds.p_seen, params)
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const O_FILE: &str = "O.zslm";
pub const P_SEEN_COMBINED_FILE: &str = "P_seen_combined.zslm";
pub const P_UNSEEN_COMBINED_FILE: &str = "P_unseen_combined.zslm";

impl AmssfeModel {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| ZslError::io(dir, e))?;
        let e = &self.expansion;
        let mut man = Manifest::new();
        man.set("method", "amssfe")
            .set("alpha", e.alpha)
            .set("beta", e.beta)
            .set("g_neighbors", e.g_neighbors)
            .set("k", e.k())
            .set("semantic_dim", e.p_seen_combined.ncols() - e.k())
            .set("visual_dim", e.vae.input_dim())
            .set("expansion_epochs_run", e.history.len())
            .set("mapping_epochs_run", self.mapping.history.len());
        if let Some(last) = e.history.last() {
            man.set("final_expansion_loss", format!("{:?}", last.total));
        }
        if let Some(last) = self.mapping.history.last() {
            man.set("final_mapping_loss", format!("{:?}", last));
        }
        let spectrum: Vec<String> = e.manifold.spectrum.iter().map(|v| format!("{v:?}")).collect();
        man.set("manifold_spectrum", spectrum.join(","));
        e.vae.save(dir, &mut man)?;
        io::save_matrix_binary(&e.manifold.o, dir.join(O_FILE))?;
        io::save_matrix_binary(&e.p_seen_combined, dir.join(P_SEEN_COMBINED_FILE))?;
        io::save_matrix_binary(&e.p_unseen_combined, dir.join(P_UNSEEN_COMBINED_FILE))?;
        io::save_matrix_binary(&self.mapping.encoder.weight, dir.join("mapping.encoder.weight.zslm"))?;
        io::save_matrix_binary(&self.mapping.encoder.bias, dir.join("mapping.encoder.bias.zslm"))?;
        io::save_matrix_binary(&self.mapping.decoder.weight, dir.join("mapping.decoder.weight.zslm"))?;
        io::save_matrix_binary(&self.mapping.decoder.bias, dir.join("mapping.decoder.bias.zslm"))?;
        man.save(dir.join(MANIFEST_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let man = Manifest::load(dir.join(MANIFEST_FILE))?;
        if man.get("method") != Some("amssfe") {
            return Err(ZslError::InvalidParam("bundle is not an amssfe model".into()));
        }
        let o = io::load_matrix_binary(dir.join(O_FILE))?;
        let spectrum = man
            .require("manifold_spectrum")?
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| ZslError::InvalidParam(format!("bad spectrum value {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let expansion = ExpansionModel {
            vae: VaeModel::load(dir, &man)?,
            manifold: EmbeddedManifold {
                target_dim: o.ncols(),
                o,
                spectrum,
            },
            p_seen_combined: io::load_matrix_binary(dir.join(P_SEEN_COMBINED_FILE))?,
            p_unseen_combined: io::load_matrix_binary(dir.join(P_UNSEEN_COMBINED_FILE))?,
            alpha: man.parse_value("alpha")?,
            beta: man.parse_value("beta")?,
            g_neighbors: man.parse_value("g_neighbors")?,
            history: Vec::new(),
        };
        let mapping = LinearAutoencoder {
            encoder: Dense {
                weight: io::load_matrix_binary(dir.join("mapping.encoder.weight.zslm"))?,
                bias: io::load_matrix_binary(dir.join("mapping.encoder.bias.zslm"))?,
            },
            decoder: Dense {
                weight: io::load_matrix_binary(dir.join("mapping.decoder.weight.zslm"))?,
                bias: io::load_matrix_binary(dir.join("mapping.decoder.bias.zslm"))?,
            },
            history: Vec::new(),
        };
        Ok(AmssfeModel { expansion, mapping })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize_dataset, SyntheticSpec};
    use crate::matrix::from_rows;

    #[test]
    fn centers_arithmetic() {
        let x = from_rows(&[vec![0.0, 0.0], vec![2.0, 4.0], vec![5.0, 5.0]]).unwrap();
        let c = class_centers_visual(&x, &[0, 0, 1], 2).unwrap();
        assert_eq!(c, from_rows(&[vec![1.0, 2.0], vec![5.0, 5.0]]).unwrap());
        assert!(class_centers_visual(&x, &[0, 0, 0], 2).is_err());
    }

    #[test]
    fn collinear_mds() {
        let d = from_rows(&[vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 1.0], vec![2.0, 1.0, 0.0]]).unwrap();
        let em = extract_embedded_manifold(&d, 1).unwrap();
        let mut c: Vec<f64> = em.o.column(0).iter().copied().collect();
        if c[0] > 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        for (a, b) in c.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn two_point_mds() {
        let d = from_rows(&[vec![0.0, 5.0], vec![5.0, 0.0]]).unwrap();
        let em = extract_embedded_manifold(&d, 1).unwrap();
        assert!((em.o[(0, 0)].abs() - 2.5).abs() < 1e-12);
        assert!((em.o[(0, 0)] + em.o[(1, 0)]).abs() < 1e-12);
        assert!(extract_embedded_manifold(&from_rows(&[vec![0.0]]).unwrap(), 1).is_err());
        assert!(extract_embedded_manifold(&d, 2).is_err());
    }

    #[test]
    fn alignment_trivial_cases() {
        let o = from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let s = from_rows(&[vec![3.0, 0.0], vec![0.0, 0.5]]).unwrap();
        let (l, _) = alignment_loss(&s, &o, &[0, 1]).unwrap();
        assert!(l.abs() < 1e-15);
        let s = from_rows(&[vec![0.0, 1.0], vec![4.0, 0.0]]).unwrap();
        let (l, _) = alignment_loss(&s, &o, &[0, 1]).unwrap();
        assert!((l - 2.0).abs() < 1e-15);
        let s = from_rows(&[vec![0.0, 0.0], vec![4.0, 0.0]]).unwrap();
        assert!(matches!(alignment_loss(&s, &o, &[0, 1]), Err(ZslError::ZeroNorm(_))));
    }

    #[test]
    fn unseen_expansion_copies_exact_match() {
        let p_seen = from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let exp = from_rows(&[vec![7.0], vec![-3.0]]).unwrap();
        let p_unseen = from_rows(&[vec![0.0, 2.0]]).unwrap();
        let c = update_unseen_prototypes(&p_unseen, &p_seen, &exp, 1).unwrap();
        assert!((c[(0, 2)] - (-6.0)).abs() < 1e-12);
        let mid = from_rows(&[vec![0.5, 0.5]]).unwrap();
        let c = update_unseen_prototypes(&mid, &p_seen, &exp, 2).unwrap();
        assert!((c[(0, 2)] - 2.0).abs() < 1e-9);
        assert_eq!(c.columns(0, 2), mid.columns(0, 2));
    }

    #[test]
    fn default_width_rounds() {
        assert_eq!(default_expansion_width(85), 51);
        assert_eq!(default_expansion_width(20), 12);
        assert_eq!(default_expansion_width(1), 1);
    }

    #[test]
    fn mapping_separable_noise_free() {
        let ds = synthesize_dataset(&SyntheticSpec {
            noise_sigma: 0.0,
            examples_per_class: 5,
            ..Default::default()
        })
        .unwrap();
        let ae = train_baseline(&ds, &MappingParams::default()).unwrap();
        let h = ae.encode(&ds.x_train).unwrap();
        for (i, &y) in ds.train_local_labels().iter().enumerate() {
            let c = linalg::cosine_similarity(
                h.row(i).transpose().as_slice(),
                ds.p_seen.row(y).transpose().as_slice(),
            )
            .unwrap();
            assert!(c >= 0.999, "row {i}: cos {c}");
        }
    }
}
