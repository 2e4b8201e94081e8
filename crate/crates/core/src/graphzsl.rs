//! Part-graph zero-shot recognition.
//!
//! Each example is a graph whose nodes are cropped parts. All examples share
//! one adjacency, built by testing whether averaging two parts raises the
//! confidence of a whole-feature classifier above either part alone. A stack
//! of normalized graph convolutions is read out by concatenating every
//! layer's output and averaging over nodes; an MLP head regresses the class
//! prototype under mean absolute error.

use std::path::Path;

use nalgebra::{DMatrix, RowDVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{self, SyntheticSpec};
use crate::error::{Result, ZslError};
use crate::eval::{self, Scope};
use crate::io::{self, Manifest};
use crate::matrix::{self, Matrix};
use crate::nn::{self, AdamConfig, AdamState, Dense, Mlp, MlpSpec};
use crate::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct PartLayout {
    pub keypoints: Vec<(f64, f64)>,
    pub width: f64,
    pub height: f64,
    pub crop_w: f64,
    pub crop_h: f64,
}

/// Top-left corner and size of a cropped part, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

pub const DEFAULT_IMAGE_SIZE: f64 = 224.0;
pub const DEFAULT_CROP: f64 = 56.0;

impl PartLayout {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_w > 0.0 && self.crop_w <= self.width && self.crop_h > 0.0 && self.crop_h <= self.height) {
            return Err(ZslError::InvalidParam(format!(
                "crop {}x{} does not fit image {}x{}",
                self.crop_w, self.crop_h, self.width, self.height
            )));
        }
        for (i, &(x, y)) in self.keypoints.iter().enumerate() {
            if !(0.0..self.width).contains(&x) || !(0.0..self.height).contains(&y) {
                return Err(ZslError::InvalidParam(format!("keypoint {i} ({x}, {y}) lies outside the image")));
            }
        }
        Ok(())
    }
}

/// Boxes centred on each keypoint, shifted to stay inside the image.
pub fn crop_parts(layout: &PartLayout) -> Vec<CropBox> {
    let max_x = (layout.width - layout.crop_w).max(0.0);
    let max_y = (layout.height - layout.crop_h).max(0.0);
    layout
        .keypoints
        .iter()
        .map(|&(kx, ky)| CropBox {
            x: (kx - layout.crop_w / 2.0).clamp(0.0, max_x),
            y: (ky - layout.crop_h / 2.0).clamp(0.0, max_y),
            w: layout.crop_w,
            h: layout.crop_h,
        })
        .collect()
}

/// Reads `part_id,x,y` lines (header required). Part ids must be `0..p` in order.
pub fn load_keypoints(path: impl AsRef<Path>) -> Result<Vec<(f64, f64)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ZslError::io(path, e))?;
    let perr = |message: String| ZslError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(perr(format!("expected part_id,x,y at line {}", ln + 1)));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| perr(format!("bad part id {:?} at line {}", fields[0], ln + 1)))?;
        if id != out.len() {
            return Err(perr(format!("part id {id} out of order at line {}", ln + 1)));
        }
        let x: f64 = fields[1]
            .parse()
            .map_err(|_| perr(format!("bad x {:?} at line {}", fields[1], ln + 1)))?;
        let y: f64 = fields[2]
            .parse()
            .map_err(|_| perr(format!("bad y {:?} at line {}", fields[2], ln + 1)))?;
        out.push((x, y));
    }
    if out.is_empty() {
        return Err(perr("no keypoints".into()));
    }
    Ok(out)
}

pub fn save_keypoints(points: &[(f64, f64)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("part_id,x,y\n");
    for (i, (x, y)) in points.iter().enumerate() {
        s.push_str(&format!("{i},{x:?},{y:?}\n"));
    }
    std::fs::write(path, s).map_err(|e| ZslError::io(path, e))
}

/// Multinomial logistic regression on whole-example features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        ClassifierParams {
            epochs: 300,
            lr: 0.01,
            l2: 1e-4,
        }
    }
}

fn softmax_rows(z: &mut Matrix) {
    for mut row in z.row_iter_mut() {
        let mx = row.max();
        row.apply(|v| *v = (*v - mx).exp());
        let s = row.sum();
        row /= s;
    }
}

impl LogisticRegression {
    /// Full-batch cross-entropy training from zero weights.
    pub fn fit(x: &Matrix, labels: &[usize], classes: usize, params: &ClassifierParams) -> Result<Self> {
        if labels.len() != x.nrows() {
            return Err(ZslError::Shape(format!("{} labels for {} rows", labels.len(), x.nrows())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(ZslError::InvalidDataset(format!("label {bad} outside 0..{classes}")));
        }
        let mut clf = LogisticRegression {
            weight: DMatrix::zeros(x.ncols(), classes),
            bias: DMatrix::zeros(1, classes),
        };
        let mut adam = AdamState::new(
            AdamConfig {
                lr: params.lr,
                ..Default::default()
            },
            &[&clf.weight, &clf.bias],
        );
        let nf = x.nrows() as f64;
        let dense = |c: &LogisticRegression| Dense {
            weight: c.weight.clone(),
            bias: c.bias.clone(),
        };
        for _ in 0..params.epochs {
            let layer = dense(&clf);
            let mut probs = layer.forward(x);
            softmax_rows(&mut probs);
            for (i, &y) in labels.iter().enumerate() {
                probs[(i, y)] -= 1.0;
            }
            probs /= nf;
            let (mut dw, db, _) = layer.backward(x, &probs);
            dw += &clf.weight * params.l2;
            adam.update(vec![&mut clf.weight, &mut clf.bias], &[dw, db])?;
        }
        Ok(clf)
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.weight.nrows() {
            return Err(ZslError::Shape(format!(
                "classifier input width {} vs {}",
                x.ncols(),
                self.weight.nrows()
            )));
        }
        let mut z = x * &self.weight;
        for mut row in z.row_iter_mut() {
            row += &self.bias;
        }
        softmax_rows(&mut z);
        Ok(z)
    }
}

/// Whole-example feature: the mean of the part features.
pub fn whole_feature(parts: &Matrix) -> RowDVector<f64> {
    matrix::column_means(parts)
}

/// `C[i][j]` is the mean true-class probability of `(f_i + f_j)/2` over the
/// examples; the diagonal holds single-part confidences.
pub fn part_pair_confidence(clf: &LogisticRegression, parts: &[Matrix], labels: &[usize]) -> Result<Matrix> {
    if parts.is_empty() || parts.len() != labels.len() {
        return Err(ZslError::Shape(format!("{} graphs for {} labels", parts.len(), labels.len())));
    }
    let p = parts[0].nrows();
    let dpart = parts[0].ncols();
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|i| (i..p).map(move |j| (i, j))).collect();
    let mut c = DMatrix::zeros(p, p);
    for (f, &y) in parts.iter().zip(labels) {
        if f.shape() != (p, dpart) {
            return Err(ZslError::Shape("graphs disagree on part count or width".into()));
        }
        let avg = DMatrix::from_fn(pairs.len(), dpart, |r, col| {
            let (i, j) = pairs[r];
            0.5 * (f[(i, col)] + f[(j, col)])
        });
        let probs = clf.predict_proba(&avg)?;
        if y >= probs.ncols() {
            return Err(ZslError::InvalidDataset(format!("label {y} outside the classifier's classes")));
        }
        for (r, &(i, j)) in pairs.iter().enumerate() {
            c[(i, j)] += probs[(r, y)];
        }
    }
    c /= parts.len() as f64;
    for i in 0..p {
        for j in 0..i {
            c[(i, j)] = c[(j, i)];
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdjacencyRule {
    Epsilon(f64),
    /// Keep the largest edge count not exceeding this target.
    TargetEdges(usize),
}

/// Largest `ε` for which pair `(i, j)` is still an edge (edge iff `ε` is
/// strictly below it).
fn pair_threshold(c: &Matrix, single: &[f64], i: usize, j: usize) -> f64 {
    (c[(i, j)] - single[i]).min(c[(i, j)] - single[j])
}

/// Shared adjacency from pair confidences. Returns the matrix and the `ε`
/// used.
pub fn build_adjacency(c: &Matrix, single: &[f64], rule: AdjacencyRule) -> Result<(Matrix, f64)> {
    let p = c.nrows();
    if !c.is_square() || single.len() != p {
        return Err(ZslError::Shape(format!(
            "confidence {:?} with {} single scores",
            c.shape(),
            single.len()
        )));
    }
    let eps = match rule {
        AdjacencyRule::Epsilon(e) => e,
        AdjacencyRule::TargetEdges(target) => {
            let max_edges = p * p.saturating_sub(1) / 2;
            if target > max_edges {
                return Err(ZslError::InvalidParam(format!(
                    "target_edges {target} exceeds the {max_edges} possible edges"
                )));
            }
            let mut t: Vec<f64> = (0..p)
                .flat_map(|i| ((i + 1)..p).map(move |j| (i, j)))
                .map(|(i, j)| pair_threshold(c, single, i, j))
                .collect();
            t.sort_by(|a, b| b.total_cmp(a));
            // With ε = t[target], exactly the pairs strictly above it remain.
            if target == t.len() {
                f64::NEG_INFINITY
            } else {
                t[target]
            }
        }
    };
    if eps.is_nan() {
        return Err(ZslError::InvalidParam("epsilon is NaN".into()));
    }
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in (i + 1)..p {
            if c[(i, j)] > single[i] + eps && c[(i, j)] > single[j] + eps {
                a[(i, j)] = 1.0;
                a[(j, i)] = 1.0;
            }
        }
    }
    Ok((a, eps))
}

pub fn edge_count(a: &Matrix) -> usize {
    let p = a.nrows();
    (0..p)
        .flat_map(|i| ((i + 1)..p).map(move |j| (i, j)))
        .filter(|&(i, j)| a[(i, j)] != 0.0)
        .count()
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the row sums of `A + I`.
pub fn normalized_operator(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(ZslError::Shape(format!("adjacency is {:?}", a.shape())));
    }
    let p = a.nrows();
    let at = a + DMatrix::<f64>::identity(p, p);
    let dinv: Vec<f64> = (0..p).map(|i| 1.0 / at.row(i).sum().sqrt()).collect();
    Ok(DMatrix::from_fn(p, p, |i, j| dinv[i] * at[(i, j)] * dinv[j]))
}

fn check_layer(a_hat: &Matrix, h: &Matrix, theta: &Matrix) -> Result<()> {
    if h.nrows() != a_hat.nrows() || h.ncols() != theta.nrows() {
        return Err(ZslError::Shape(format!(
            "gcn layer: operator {:?}, features {:?}, theta {:?}",
            a_hat.shape(),
            h.shape(),
            theta.shape()
        )));
    }
    Ok(())
}

/// `relu(Â H θ)`.
pub fn gcn_layer(a: &Matrix, h: &Matrix, theta: &Matrix) -> Result<Matrix> {
    let a_hat = normalized_operator(a)?;
    check_layer(&a_hat, h, theta)?;
    Ok((a_hat * h * theta).map(|v| v.max(0.0)))
}

/// Column means of the concatenated layer outputs.
pub fn gcn_readout(a: &Matrix, f: &Matrix, thetas: &[Matrix]) -> Result<RowDVector<f64>> {
    if thetas.is_empty() {
        return Err(ZslError::InvalidParam("readout needs at least one layer".into()));
    }
    let a_hat = normalized_operator(a)?;
    let mut h = f.clone();
    let mut parts = Vec::with_capacity(thetas.len());
    for theta in thetas {
        check_layer(&a_hat, &h, theta)?;
        h = (&a_hat * &h * theta).map(|v| v.max(0.0));
        parts.push(matrix::column_means(&h));
    }
    let width: usize = parts.iter().map(|p| p.len()).sum();
    let mut v = RowDVector::zeros(width);
    let mut off = 0;
    for p in parts {
        v.columns_mut(off, p.len()).copy_from(&p);
        off += p.len();
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    /// Output channels of each graph convolution.
    pub channels: Vec<usize>,
    /// Hidden widths of the regression head.
    pub head_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for GcnParams {
    fn default() -> Self {
        GcnParams {
            channels: vec![512; 4],
            head_hidden: vec![512, 512],
            epochs: 5000,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl GcnParams {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(ZslError::InvalidParam("channels must be a non-empty list of positive widths".into()));
        }
        if self.head_hidden.contains(&0) {
            return Err(ZslError::InvalidParam("head widths must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ZslError::InvalidParam("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ZslError::InvalidParam(format!("lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    pub adjacency: Matrix,
    pub thetas: Vec<Matrix>,
    pub head: Mlp,
    /// Mean absolute error per epoch.
    pub history: Vec<f64>,
}

/// Forward state of a batch of graphs stacked example-major (`B·p` rows).
#[derive(Debug, Clone)]
pub struct GcnCache {
    /// `Â H_{l-1}` for each layer.
    propagated: Vec<Matrix>,
    /// Pre-activation `Â H_{l-1} θ_l`.
    pre: Vec<Matrix>,
    head: nn::MlpCache,
    nodes: usize,
}

impl GcnCache {
    pub fn output(&self) -> &Matrix {
        &self.head.output
    }
}

fn propagate(a_hat: &Matrix, h: &Matrix, p: usize) -> Matrix {
    let mut out = DMatrix::zeros(h.nrows(), h.ncols());
    for g in 0..h.nrows() / p {
        let block = a_hat * h.rows(g * p, p);
        out.rows_mut(g * p, p).copy_from(&block);
    }
    out
}

fn stack_graphs(graphs: &[&Matrix]) -> Result<Matrix> {
    let p = graphs[0].nrows();
    let c = graphs[0].ncols();
    let mut out = DMatrix::zeros(p * graphs.len(), c);
    for (g, f) in graphs.iter().enumerate() {
        if f.shape() != (p, c) {
            return Err(ZslError::Shape(format!(
                "graph {g} is {:?}, expected {:?}",
                f.shape(),
                (p, c)
            )));
        }
        out.rows_mut(g * p, p).copy_from(*f);
    }
    Ok(out)
}

impl GcnModel {
    pub fn new(adjacency: Matrix, in_width: usize, out_width: usize, params: &GcnParams) -> Result<Self> {
        params.validate()?;
        let p = adjacency.nrows();
        if !adjacency.is_square() || p == 0 {
            return Err(ZslError::Shape(format!("adjacency is {:?}", adjacency.shape())));
        }
        for i in 0..p {
            if adjacency[(i, i)] != 0.0 {
                return Err(ZslError::InvalidParam(format!("adjacency has a self-loop at {i}")));
            }
            for j in 0..p {
                let v = adjacency[(i, j)];
                if (v != 0.0 && v != 1.0) || v != adjacency[(j, i)] {
                    return Err(ZslError::InvalidParam("adjacency must be symmetric 0/1".into()));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut widths = vec![in_width];
        widths.extend(&params.channels);
        let thetas = widths
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], &mut rng).weight)
            .collect();
        let mut head_widths = vec![params.channels.iter().sum()];
        head_widths.extend(&params.head_hidden);
        head_widths.push(out_width);
        let head = Mlp::new(&MlpSpec::relu_hidden(head_widths, params.seed.wrapping_add(1)))?;
        Ok(GcnModel {
            adjacency,
            thetas,
            head,
            history: Vec::new(),
        })
    }

    pub fn nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn in_width(&self) -> usize {
        self.thetas[0].nrows()
    }

    pub fn forward(&self, graphs: &[&Matrix]) -> Result<GcnCache> {
        if graphs.is_empty() {
            return Err(ZslError::InvalidParam("empty graph batch".into()));
        }
        let p = self.nodes();
        if graphs[0].nrows() != p || graphs[0].ncols() != self.in_width() {
            return Err(ZslError::Shape(format!(
                "graph {:?} vs model nodes {p} and width {}",
                graphs[0].shape(),
                self.in_width()
            )));
        }
        let a_hat = normalized_operator(&self.adjacency)?;
        let b = graphs.len();
        let mut h = stack_graphs(graphs)?;
        let mut propagated = Vec::with_capacity(self.thetas.len());
        let mut pre = Vec::with_capacity(self.thetas.len());
        let width: usize = self.thetas.iter().map(|t| t.ncols()).sum();
        let mut v = DMatrix::zeros(b, width);
        let mut off = 0;
        for theta in &self.thetas {
            let ah = propagate(&a_hat, &h, p);
            let z = &ah * theta;
            h = z.map(|x| x.max(0.0));
            for g in 0..b {
                let means = matrix::column_means(&h.rows(g * p, p).into_owned());
                v.view_mut((g, off), (1, theta.ncols())).copy_from(&means);
            }
            off += theta.ncols();
            propagated.push(ah);
            pre.push(z);
        }
        let head = self.head.forward(&v)?;
        Ok(GcnCache {
            propagated,
            pre,
            head,
            nodes: p,
        })
    }

    pub fn predict(&self, graphs: &[&Matrix]) -> Result<Matrix> {
        Ok(self.forward(graphs)?.head.output)
    }

    /// Gradients in [`GcnModel::params`] order for upstream gradient `g` at
    /// the head output.
    pub fn backward(&self, cache: &GcnCache, g: &Matrix) -> Result<Vec<Matrix>> {
        let p = cache.nodes;
        let (head_grads, dv) = self.head.backward(&cache.head, g)?;
        let a_hat = normalized_operator(&self.adjacency)?;
        let b = dv.nrows();
        let k = self.thetas.len();
        let mut offsets = Vec::with_capacity(k);
        let mut off = 0;
        for t in &self.thetas {
            offsets.push(off);
            off += t.ncols();
        }
        let mut theta_grads = vec![DMatrix::zeros(0, 0); k];
        let mut carry: Option<Matrix> = None;
        for l in (0..k).rev() {
            let c = self.thetas[l].ncols();
            let mut dh = DMatrix::from_fn(b * p, c, |r, j| dv[(r / p, offsets[l] + j)] / p as f64);
            if let Some(cg) = carry.take() {
                dh += cg;
            }
            dh.zip_apply(&cache.pre[l], |d, z| {
                if z <= 0.0 {
                    *d = 0.0
                }
            });
            theta_grads[l] = cache.propagated[l].transpose() * &dh;
            if l > 0 {
                let dprop = dh * self.thetas[l].transpose();
                carry = Some(propagate(&a_hat, &dprop, p));
            }
        }
        let mut grads = theta_grads;
        grads.extend(head_grads);
        Ok(grads)
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut v: Vec<&Matrix> = self.thetas.iter().collect();
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v: Vec<&mut Matrix> = self.thetas.iter_mut().collect();
        v.extend(self.head.params_mut());
        v
    }

    /// Mean absolute error against `targets` and its parameter gradients.
    pub fn loss_and_grads(&self, graphs: &[&Matrix], targets: &Matrix) -> Result<(f64, Vec<Matrix>)> {
        let cache = self.forward(graphs)?;
        if targets.shape() != cache.output().shape() {
            return Err(ZslError::Shape(format!(
                "targets {:?} vs outputs {:?}",
                targets.shape(),
                cache.output().shape()
            )));
        }
        let (loss, g) = nn::mae(cache.output(), targets);
        Ok((loss, self.backward(&cache, &g)?))
    }
}

/// Trains a GCN on graphs sharing `adjacency`; `targets` holds each
/// example's semantic prototype.
pub fn gcn_train(adjacency: Matrix, graphs: &[Matrix], targets: &Matrix, params: &GcnParams) -> Result<GcnModel> {
    if graphs.is_empty() || graphs.len() != targets.nrows() {
        return Err(ZslError::Shape(format!("{} graphs for {} targets", graphs.len(), targets.nrows())));
    }
    let mut model = GcnModel::new(adjacency, graphs[0].ncols(), targets.ncols(), params)?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: params.lr,
            ..Default::default()
        },
        &model.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x06c4_7a1e);
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(params.batch_size) {
            let gs: Vec<&Matrix> = batch.iter().map(|&i| &graphs[i]).collect();
            let t = matrix::select_rows(targets, batch);
            let (loss, grads) = model.loss_and_grads(&gs, &t)?;
            if !loss.is_finite() {
                return Err(ZslError::Numerical(format!("non-finite MAE at epoch {epoch}")));
            }
            total += loss * batch.len() as f64;
            adam.update(model.params_mut(), &grads)?;
        }
        let mean = total / graphs.len() as f64;
        log::debug!("gcn epoch {}: MAE {mean:.6e}", epoch + 1);
        model.history.push(mean);
    }
    Ok(model)
}

/// Ranks prototypes by cosine similarity to the regressed semantics. With
/// [`Scope::Gzsl`] the seen prototypes come first in the index space.
pub fn recognize_graph(
    model: &GcnModel,
    graphs: &[Matrix],
    p_seen: &Matrix,
    p_unseen: &Matrix,
    scope: Scope,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let refs: Vec<&Matrix> = graphs.iter().collect();
    let s = model.predict(&refs)?;
    match scope {
        Scope::Czsl => eval::nearest_prototypes(&s, p_unseen, k),
        Scope::Gzsl => eval::nearest_prototypes(&s, &matrix::vconcat(p_seen, p_unseen)?, k),
    }
}

/// A zero-shot split whose examples are part graphs. `base` carries the
/// whole-example features (part means), labels and prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    pub base: Dataset,
    pub parts_train: Vec<Matrix>,
    pub parts_test: Vec<Matrix>,
    pub keypoints: Vec<(f64, f64)>,
    pub image_width: f64,
    pub image_height: f64,
    /// Precomputed shared adjacency, if supplied.
    pub adjacency: Option<Matrix>,
}

pub const PARTS_TRAIN: &str = "parts_train.zslm";
pub const PARTS_TEST: &str = "parts_test.zslm";
pub const KEYPOINTS: &str = "keypoints.csv";
pub const ADJACENCY: &str = "A.zslm";
pub const GRAPH_MANIFEST: &str = "graph.txt";

fn whole_features(parts: &[Matrix]) -> Matrix {
    let d = parts[0].ncols();
    let mut x = DMatrix::zeros(parts.len(), d);
    for (i, f) in parts.iter().enumerate() {
        x.row_mut(i).copy_from(&whole_feature(f));
    }
    x
}

fn unstack(m: &Matrix, p: usize, what: &str) -> Result<Vec<Matrix>> {
    if p == 0 || m.nrows() % p != 0 {
        return Err(ZslError::InvalidDataset(format!(
            "{what} has {} rows, not a multiple of {p} parts",
            m.nrows()
        )));
    }
    Ok((0..m.nrows() / p).map(|g| m.rows(g * p, p).into_owned()).collect())
}

impl GraphDataset {
    pub fn parts(&self) -> usize {
        self.keypoints.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let p = self.parts();
        if self.parts_train.len() != self.base.y_train.len() || self.parts_test.len() != self.base.y_test.len() {
            return Err(ZslError::InvalidDataset("graph count does not match label count".into()));
        }
        for f in self.parts_train.iter().chain(&self.parts_test) {
            if f.nrows() != p {
                return Err(ZslError::InvalidDataset(format!("graph with {} parts, expected {p}", f.nrows())));
            }
        }
        if let Some(a) = &self.adjacency {
            if a.shape() != (p, p) {
                return Err(ZslError::InvalidDataset(format!("adjacency {:?} for {p} parts", a.shape())));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        dataset::save_dataset(&self.base, dir)?;
        io::save_matrix_binary(&stack_owned(&self.parts_train)?, dir.join(PARTS_TRAIN))?;
        io::save_matrix_binary(&stack_owned(&self.parts_test)?, dir.join(PARTS_TEST))?;
        save_keypoints(&self.keypoints, dir.join(KEYPOINTS))?;
        if let Some(a) = &self.adjacency {
            io::save_matrix_binary(a, dir.join(ADJACENCY))?;
        }
        let mut man = Manifest::new();
        man.set("parts", self.parts())
            .set("part_dim", self.parts_train[0].ncols())
            .set("image_width", self.image_width)
            .set("image_height", self.image_height);
        man.save(dir.join(GRAPH_MANIFEST))
    }

    /// Reads a graph dataset. A missing `keypoints.csv` is reported as
    /// [`ZslError::InvalidDataset`] naming the file.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let kp_path = dir.join(KEYPOINTS);
        if !kp_path.exists() {
            return Err(ZslError::InvalidDataset(format!("missing keypoints: {}", kp_path.display())));
        }
        let keypoints = load_keypoints(&kp_path)?;
        let man = Manifest::load(dir.join(GRAPH_MANIFEST))?;
        let p: usize = man.parse_value("parts")?;
        if p != keypoints.len() {
            return Err(ZslError::InvalidDataset(format!(
                "{} keypoints for {p} parts",
                keypoints.len()
            )));
        }
        let base = dataset::load_dataset(dir)?;
        let a_path = dir.join(ADJACENCY);
        let gd = GraphDataset {
            parts_train: unstack(&io::load_matrix_binary(dir.join(PARTS_TRAIN))?, p, PARTS_TRAIN)?,
            parts_test: unstack(&io::load_matrix_binary(dir.join(PARTS_TEST))?, p, PARTS_TEST)?,
            keypoints,
            image_width: man.parse_value("image_width")?,
            image_height: man.parse_value("image_height")?,
            adjacency: if a_path.exists() {
                Some(io::load_matrix_binary(a_path)?)
            } else {
                None
            },
            base,
        };
        gd.validate()?;
        Ok(gd)
    }
}

fn stack_owned(graphs: &[Matrix]) -> Result<Matrix> {
    let refs: Vec<&Matrix> = graphs.iter().collect();
    stack_graphs(&refs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSynthSpec {
    /// Class structure; `d` is the per-part feature width.
    pub base: SyntheticSpec,
    pub parts: usize,
    /// Part pairs whose features carry cancelling noise, so their average is
    /// cleaner than either part.
    pub informative_pairs: Vec<(usize, usize)>,
    pub pair_noise: f64,
    /// Scale of the part-specific component of each part's generator.
    pub part_spread: f64,
}

impl Default for GraphSynthSpec {
    fn default() -> Self {
        GraphSynthSpec {
            base: SyntheticSpec {
                m_seen: 40,
                d: 32,
                nonnegative: false,
                ..Default::default()
            },
            parts: 8,
            informative_pairs: vec![(0, 1), (2, 3)],
            pair_noise: 1.0,
            part_spread: 0.5,
        }
    }
}

/// Seeded planted part graphs: part `i` of a class-`c` example is
/// `p_c G_i + noise`, with `G_i` a shared map plus a part-specific one.
pub fn synthesize_graph_dataset(spec: &GraphSynthSpec) -> Result<GraphDataset> {
    let p = spec.parts;
    if p < 2 {
        return Err(ZslError::InvalidParam("need at least 2 parts".into()));
    }
    for &(i, j) in &spec.informative_pairs {
        if i == j || i >= p || j >= p {
            return Err(ZslError::InvalidParam(format!("bad informative pair ({i}, {j})")));
        }
    }
    if !(spec.pair_noise >= 0.0 && spec.part_spread >= 0.0) {
        return Err(ZslError::InvalidParam("pair_noise and part_spread must be >= 0".into()));
    }
    let bs = &spec.base;
    let (protos, g_shared) = dataset::synthesize_generator(bs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(bs.seed ^ 0x9a4f_0c3d);
    let scale = 1.0 / (bs.n as f64).sqrt();
    let gens: Vec<Matrix> = (0..p)
        .map(|_| {
            let e = DMatrix::from_fn(bs.n, bs.d, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            });
            &g_shared + e * spec.part_spread
        })
        .collect();
    let keypoints: Vec<(f64, f64)> = (0..p)
        .map(|_| {
            let x: f64 = rand::Rng::random_range(&mut rng, 0.0..DEFAULT_IMAGE_SIZE);
            let y: f64 = rand::Rng::random_range(&mut rng, 0.0..DEFAULT_IMAGE_SIZE);
            (x.floor(), y.floor())
        })
        .collect();
    let mut sample = |classes: std::ops::Range<usize>, per_class: usize| {
        let mut graphs = Vec::new();
        let mut labels = Vec::new();
        for c in classes {
            for _ in 0..per_class {
                let mut f = DMatrix::zeros(p, bs.d);
                for (i, g) in gens.iter().enumerate() {
                    let clean = protos.row(c) * g;
                    for j in 0..bs.d {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        f[(i, j)] = clean[j] + bs.noise_sigma * z;
                    }
                }
                for &(i, j) in &spec.informative_pairs {
                    for col in 0..bs.d {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        f[(i, col)] += spec.pair_noise * z;
                        f[(j, col)] -= spec.pair_noise * z;
                    }
                }
                graphs.push(f);
                labels.push(c);
            }
        }
        (graphs, labels)
    };
    let m = bs.m_seen;
    let v = bs.v_unseen;
    let (parts_train, y_train) = sample(0..m, bs.examples_per_class);
    let (mut parts_test, mut y_test) = sample(m..m + v, bs.examples_per_class);
    if bs.seen_test_per_class > 0 {
        let (g, y) = sample(0..m, bs.seen_test_per_class);
        parts_test.extend(g);
        y_test.extend(y);
    }
    let base = Dataset::new(
        whole_features(&parts_train),
        y_train,
        protos.rows(0, m).into_owned(),
        protos.rows(m, v).into_owned(),
        whole_features(&parts_test),
        y_test,
    )?;
    let gd = GraphDataset {
        base,
        parts_train,
        parts_test,
        keypoints,
        image_width: DEFAULT_IMAGE_SIZE,
        image_height: DEFAULT_IMAGE_SIZE,
        adjacency: None,
    };
    gd.validate()?;
    Ok(gd)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphParams {
    pub rule: AdjacencyRule,
    pub classifier: ClassifierParams,
    pub gcn: GcnParams,
    pub crop_w: f64,
    pub crop_h: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            rule: AdjacencyRule::Epsilon(0.0),
            classifier: ClassifierParams::default(),
            gcn: GcnParams::default(),
            crop_w: DEFAULT_CROP,
            crop_h: DEFAULT_CROP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphModel {
    pub gcn: GcnModel,
    pub boxes: Vec<CropBox>,
    /// Pair confidences; absent when the adjacency was supplied.
    pub confidence: Option<Matrix>,
    pub epsilon: Option<f64>,
}

/// Builds (or takes) the shared adjacency and trains the GCN regressor.
pub fn train(gd: &GraphDataset, params: &GraphParams) -> Result<GraphModel> {
    gd.validate()?;
    let layout = PartLayout {
        keypoints: gd.keypoints.clone(),
        width: gd.image_width,
        height: gd.image_height,
        crop_w: params.crop_w,
        crop_h: params.crop_h,
    };
    layout.validate()?;
    let boxes = crop_parts(&layout);
    let labels = gd.base.train_local_labels();
    let (adjacency, confidence, epsilon) = match &gd.adjacency {
        Some(a) => (a.clone(), None, None),
        None => {
            let clf = LogisticRegression::fit(&gd.base.x_train, &labels, gd.base.num_seen(), &params.classifier)?;
            let c = part_pair_confidence(&clf, &gd.parts_train, &labels)?;
            let single: Vec<f64> = (0..c.nrows()).map(|i| c[(i, i)]).collect();
            let (a, eps) = build_adjacency(&c, &single, params.rule)?;
            log::info!("adjacency: {} edges at epsilon {eps:e}", edge_count(&a));
            (a, Some(c), Some(eps))
        }
    };
    let targets = matrix::select_rows(&gd.base.p_seen, &labels);
    let gcn = gcn_train(adjacency, &gd.parts_train, &targets, &params.gcn)?;
    Ok(GraphModel {
        gcn,
        boxes,
        confidence,
        epsilon,
    })
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BOXES_FILE: &str = "boxes.csv";

impl GraphModel {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| ZslError::io(dir, e))?;
        let g = &self.gcn;
        let mut man = Manifest::new();
        let channels: Vec<String> = g.thetas.iter().map(|t| t.ncols().to_string()).collect();
        man.set("method", "graphzsl")
            .set("parts", g.nodes())
            .set("part_dim", g.in_width())
            .set("semantic_dim", g.head.out_width())
            .set("channels", channels.join(","))
            .set("edges", edge_count(&g.adjacency))
            .set("epochs_run", g.history.len());
        if let Some(eps) = self.epsilon {
            man.set("epsilon", format!("{eps:?}"));
        }
        if let Some(last) = g.history.last() {
            man.set("final_mae", format!("{last:?}"));
        }
        io::save_matrix_binary(&g.adjacency, dir.join(ADJACENCY))?;
        for (l, t) in g.thetas.iter().enumerate() {
            io::save_matrix_binary(t, dir.join(format!("theta.{l}.zslm")))?;
        }
        g.head.save(dir, "head", &mut man)?;
        if let Some(c) = &self.confidence {
            io::save_matrix_binary(c, dir.join("C.zslm"))?;
        }
        let mut s = String::from("part_id,x,y,w,h\n");
        for (i, b) in self.boxes.iter().enumerate() {
            s.push_str(&format!("{i},{:?},{:?},{:?},{:?}\n", b.x, b.y, b.w, b.h));
        }
        let bp = dir.join(BOXES_FILE);
        std::fs::write(&bp, s).map_err(|e| ZslError::io(&bp, e))?;
        man.save(dir.join(MANIFEST_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let man = Manifest::load(dir.join(MANIFEST_FILE))?;
        if man.get("method") != Some("graphzsl") {
            return Err(ZslError::InvalidParam("bundle is not a graphzsl model".into()));
        }
        let layers = man.require("channels")?.split(',').count();
        let thetas = (0..layers)
            .map(|l| io::load_matrix_binary(dir.join(format!("theta.{l}.zslm"))))
            .collect::<Result<Vec<_>>>()?;
        let boxes_text = {
            let bp = dir.join(BOXES_FILE);
            std::fs::read_to_string(&bp).map_err(|e| ZslError::io(&bp, e))?
        };
        let boxes = io::parse_matrix_csv(&boxes_text, true)
            .map_err(|message| ZslError::Parse {
                path: dir.join(BOXES_FILE),
                message,
            })?
            .row_iter()
            .map(|r| CropBox {
                x: r[1],
                y: r[2],
                w: r[3],
                h: r[4],
            })
            .collect();
        let c_path = dir.join("C.zslm");
        Ok(GraphModel {
            gcn: GcnModel {
                adjacency: io::load_matrix_binary(dir.join(ADJACENCY))?,
                thetas,
                head: Mlp::load(dir, "head", &man)?,
                history: Vec::new(),
            },
            boxes,
            confidence: if c_path.exists() {
                Some(io::load_matrix_binary(c_path)?)
            } else {
                None
            },
            epsilon: man.get("epsilon").map(|_| man.parse_value("epsilon")).transpose()?,
        })
    }
}
