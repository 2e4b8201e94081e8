//! Datasets: ingestion from the on-disk layout, validation, and seeded
//! synthesis of desk-scale zero-shot problems.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, ZslError};
use crate::io;
use crate::matrix::{self, Matrix};

pub const X_TRAIN: &str = "X_train.zslm";
pub const Y_TRAIN: &str = "y_train.csv";
pub const P_SEEN: &str = "P_seen.zslm";
pub const P_UNSEEN: &str = "P_unseen.zslm";
pub const X_TEST: &str = "X_test.zslm";
pub const Y_TEST: &str = "y_test.csv";
/// Optional sidecars; without them seen classes are `0..m` and unseen `m..m+v`.
pub const SEEN_IDS: &str = "seen_ids.csv";
pub const UNSEEN_IDS: &str = "unseen_ids.csv";

/// Visual features, labels and the two prototype tables of a zero-shot split.
///
/// Row `i` of `p_seen` is the prototype of class `seen_ids[i]`; likewise for
/// unseen. Labels are global class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x_train: Matrix,
    pub y_train: Vec<usize>,
    pub p_seen: Matrix,
    pub p_unseen: Matrix,
    pub x_test: Matrix,
    pub y_test: Vec<usize>,
    pub seen_ids: Vec<usize>,
    pub unseen_ids: Vec<usize>,
}

impl Dataset {
    /// Builds and validates a dataset with the default dense id assignment.
    pub fn new(
        x_train: Matrix,
        y_train: Vec<usize>,
        p_seen: Matrix,
        p_unseen: Matrix,
        x_test: Matrix,
        y_test: Vec<usize>,
    ) -> Result<Self> {
        let m = p_seen.nrows();
        let v = p_unseen.nrows();
        let ds = Dataset {
            x_train,
            y_train,
            p_seen,
            p_unseen,
            x_test,
            y_test,
            seen_ids: (0..m).collect(),
            unseen_ids: (m..m + v).collect(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn num_seen(&self) -> usize {
        self.p_seen.nrows()
    }

    pub fn num_unseen(&self) -> usize {
        self.p_unseen.nrows()
    }

    pub fn visual_dim(&self) -> usize {
        self.x_train.ncols()
    }

    pub fn semantic_dim(&self) -> usize {
        self.p_seen.ncols()
    }

    pub fn seen_position(&self, class: usize) -> Option<usize> {
        self.seen_ids.iter().position(|&c| c == class)
    }

    pub fn unseen_position(&self, class: usize) -> Option<usize> {
        self.unseen_ids.iter().position(|&c| c == class)
    }

    /// Training labels as row indices into `p_seen`.
    pub fn train_local_labels(&self) -> Vec<usize> {
        self.y_train
            .iter()
            .map(|&c| self.seen_position(c).expect("validated label"))
            .collect()
    }

    /// Indices of test rows whose label is an unseen class.
    pub fn unseen_test_rows(&self) -> Vec<usize> {
        let unseen: HashSet<usize> = self.unseen_ids.iter().copied().collect();
        (0..self.y_test.len())
            .filter(|&i| unseen.contains(&self.y_test[i]))
            .collect()
    }

    pub fn seen_test_rows(&self) -> Vec<usize> {
        let seen: HashSet<usize> = self.seen_ids.iter().copied().collect();
        (0..self.y_test.len())
            .filter(|&i| seen.contains(&self.y_test[i]))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [
            ("X_train", &self.x_train),
            ("P_seen", &self.p_seen),
            ("P_unseen", &self.p_unseen),
            ("X_test", &self.x_test),
        ] {
            matrix::validate(m).map_err(|e| ZslError::InvalidDataset(format!("{name}: {e}")))?;
        }
        let bad = |msg: String| Err(ZslError::InvalidDataset(msg));
        if self.x_train.ncols() != self.x_test.ncols() {
            return bad(format!(
                "dimension mismatch: X_train has {} cols, X_test has {}",
                self.x_train.ncols(),
                self.x_test.ncols()
            ));
        }
        if self.p_seen.ncols() != self.p_unseen.ncols() {
            return bad(format!(
                "dimension mismatch: P_seen has {} cols, P_unseen has {}",
                self.p_seen.ncols(),
                self.p_unseen.ncols()
            ));
        }
        if self.y_train.len() != self.x_train.nrows() {
            return bad(format!(
                "dimension mismatch: {} training labels for {} rows",
                self.y_train.len(),
                self.x_train.nrows()
            ));
        }
        if self.y_test.len() != self.x_test.nrows() {
            return bad(format!(
                "dimension mismatch: {} test labels for {} rows",
                self.y_test.len(),
                self.x_test.nrows()
            ));
        }
        if self.seen_ids.len() != self.p_seen.nrows() {
            return bad(format!(
                "{} seen ids for {} seen prototypes",
                self.seen_ids.len(),
                self.p_seen.nrows()
            ));
        }
        if self.unseen_ids.len() != self.p_unseen.nrows() {
            return bad(format!(
                "{} unseen ids for {} unseen prototypes",
                self.unseen_ids.len(),
                self.p_unseen.nrows()
            ));
        }
        let seen: HashSet<usize> = self.seen_ids.iter().copied().collect();
        if seen.len() != self.seen_ids.len() {
            return bad("duplicate seen class id".into());
        }
        let unseen: HashSet<usize> = self.unseen_ids.iter().copied().collect();
        if unseen.len() != self.unseen_ids.len() {
            return bad("duplicate unseen class id".into());
        }
        if let Some(&c) = self.seen_ids.iter().find(|c| unseen.contains(c)) {
            return Err(ZslError::SplitOverlap(c));
        }
        if let Some((i, &c)) = self.y_train.iter().enumerate().find(|(_, c)| !seen.contains(c)) {
            return bad(format!("training label {c} at row {i} is not a seen class"));
        }
        if let Some((i, &c)) = self
            .y_test
            .iter()
            .enumerate()
            .find(|(_, c)| !seen.contains(c) && !unseen.contains(c))
        {
            return bad(format!("test label {c} at row {i} references an unknown class"));
        }
        for (name, p) in [("P_seen", &self.p_seen), ("P_unseen", &self.p_unseen)] {
            if let Some(i) = p.row_iter().position(|r| r.norm() == 0.0) {
                return bad(format!("{name} row {i} is a zero prototype"));
            }
        }
        Ok(())
    }

    /// Copy of the dataset with every visual row scaled to unit norm.
    pub fn l2_normalized(&self) -> Result<Self> {
        let mut out = self.clone();
        out.x_train = matrix::l2_normalize_rows(&self.x_train)?;
        out.x_test = matrix::l2_normalize_rows(&self.x_test)?;
        Ok(out)
    }
}

fn load_ids(path: &Path) -> Result<Option<Vec<usize>>> {
    if path.exists() {
        io::load_labels(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Reads the six-file dataset layout (plus optional id sidecars) from `dir`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let x_train = io::load_matrix_binary(dir.join(X_TRAIN))?;
    let y_train = io::load_labels(dir.join(Y_TRAIN))?;
    let p_seen = io::load_matrix_binary(dir.join(P_SEEN))?;
    let p_unseen = io::load_matrix_binary(dir.join(P_UNSEEN))?;
    let x_test = io::load_matrix_binary(dir.join(X_TEST))?;
    let y_test = io::load_labels(dir.join(Y_TEST))?;
    let m = p_seen.nrows();
    let v = p_unseen.nrows();
    let seen_ids = load_ids(&dir.join(SEEN_IDS))?.unwrap_or_else(|| (0..m).collect());
    let unseen_ids = load_ids(&dir.join(UNSEEN_IDS))?.unwrap_or_else(|| (m..m + v).collect());
    let ds = Dataset {
        x_train,
        y_train,
        p_seen,
        p_unseen,
        x_test,
        y_test,
        seen_ids,
        unseen_ids,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes the dataset layout. Id sidecars are only written when the ids
/// differ from the default dense assignment.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| ZslError::io(dir, e))?;
    io::save_matrix_binary(&ds.x_train, dir.join(X_TRAIN))?;
    io::save_labels(&ds.y_train, dir.join(Y_TRAIN))?;
    io::save_matrix_binary(&ds.p_seen, dir.join(P_SEEN))?;
    io::save_matrix_binary(&ds.p_unseen, dir.join(P_UNSEEN))?;
    io::save_matrix_binary(&ds.x_test, dir.join(X_TEST))?;
    io::save_labels(&ds.y_test, dir.join(Y_TEST))?;
    let m = ds.num_seen();
    let v = ds.num_unseen();
    if ds.seen_ids != (0..m).collect::<Vec<_>>() || ds.unseen_ids != (m..m + v).collect::<Vec<_>>() {
        io::save_labels(&ds.seen_ids, dir.join(SEEN_IDS))?;
        io::save_labels(&ds.unseen_ids, dir.join(UNSEEN_IDS))?;
    }
    Ok(())
}

/// Parameters of a synthetic zero-shot problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub m_seen: usize,
    pub v_unseen: usize,
    pub d: usize,
    pub n: usize,
    pub examples_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Prototype pairs at or above this cosine are rejected.
    pub max_cosine: f64,
    /// Attribute-like prototypes with nonnegative entries.
    pub nonnegative: bool,
    /// Extra held-out examples per seen class appended to the test split
    /// (needed for generalized evaluation).
    pub seen_test_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            m_seen: 15,
            v_unseen: 5,
            d: 64,
            n: 20,
            examples_per_class: 30,
            noise_sigma: 0.05,
            seed: 42,
            max_cosine: 0.95,
            nonnegative: true,
            seen_test_per_class: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ZslError::InvalidParam(m.to_string()));
        if self.m_seen < 2 {
            return bad("m_seen must be >= 2");
        }
        if self.v_unseen < 1 {
            return bad("v_unseen must be >= 1");
        }
        if self.n < 2 || self.d < self.n {
            return bad("need d >= n >= 2");
        }
        if self.examples_per_class < 1 {
            return bad("examples_per_class must be >= 1");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0");
        }
        if !(self.max_cosine > -1.0 && self.max_cosine <= 1.0) {
            return bad("max_cosine must lie in (-1, 1]");
        }
        Ok(())
    }
}

const PROTOTYPE_RETRIES: usize = 10_000;

fn sample_prototypes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let total = spec.m_seen + spec.v_unseen;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(total);
    while rows.len() < total {
        let mut accepted = false;
        for _ in 0..PROTOTYPE_RETRIES {
            let mut p: Vec<f64> = (0..spec.n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    if spec.nonnegative {
                        z.abs()
                    } else {
                        z
                    }
                })
                .collect();
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            p.iter_mut().for_each(|v| *v /= norm);
            let clash = rows.iter().any(|q| {
                let cos: f64 = q.iter().zip(&p).map(|(a, b)| a * b).sum();
                cos >= spec.max_cosine
            });
            if !clash {
                rows.push(p);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(ZslError::InvalidParam(format!(
                "could not place prototype {} of {total} with cosine < {} in {} dimensions after {PROTOTYPE_RETRIES} attempts",
                rows.len(),
                spec.max_cosine,
                spec.n
            )));
        }
    }
    matrix::from_rows(&rows)
}

/// Draws the synthetic generator: prototypes (m+v rows) and the fixed map
/// `G` stored as an `n x d` matrix so that a visual row is `p * G`.
pub fn synthesize_generator(spec: &SyntheticSpec) -> Result<(Matrix, Matrix)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = sample_prototypes(spec, &mut rng)?;
    let scale = 1.0 / (spec.n as f64).sqrt();
    let g = DMatrix::from_fn(spec.n, spec.d, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    });
    Ok((protos, g))
}

fn sample_examples(
    protos: &Matrix,
    g: &Matrix,
    classes: &[usize],
    per_class: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> (Matrix, Vec<usize>) {
    let d = g.ncols();
    let mut x = DMatrix::zeros(classes.len() * per_class, d);
    let mut labels = Vec::with_capacity(classes.len() * per_class);
    let mut r = 0;
    for &c in classes {
        let clean = protos.row(c) * g;
        for _ in 0..per_class {
            for j in 0..d {
                let eps: f64 = if sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    sigma * z
                } else {
                    0.0
                };
                x[(r, j)] = clean[j] + eps;
            }
            labels.push(c);
            r += 1;
        }
    }
    (x, labels)
}

/// Seeded synthetic dataset: `x = G p_class + noise`, training examples over
/// seen classes `0..m`, test examples over unseen classes `m..m+v` (plus
/// optional held-out seen examples appended after them).
pub fn synthesize_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    let (protos, g) = synthesize_generator(spec)?;
    let m = spec.m_seen;
    let v = spec.v_unseen;
    // Examples draw from a derived stream so prototypes and map stay fixed
    // when only example counts change.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f_e8a3_u64);
    let seen: Vec<usize> = (0..m).collect();
    let unseen: Vec<usize> = (m..m + v).collect();
    let (x_train, y_train) = sample_examples(
        &protos,
        &g,
        &seen,
        spec.examples_per_class,
        spec.noise_sigma,
        &mut rng,
    );
    let (mut x_test, mut y_test) = sample_examples(
        &protos,
        &g,
        &unseen,
        spec.examples_per_class,
        spec.noise_sigma,
        &mut rng,
    );
    if spec.seen_test_per_class > 0 {
        let (xs, ys) = sample_examples(
            &protos,
            &g,
            &seen,
            spec.seen_test_per_class,
            spec.noise_sigma,
            &mut rng,
        );
        x_test = matrix::vconcat(&x_test, &xs)?;
        y_test.extend(ys);
    }
    let p_seen = protos.rows(0, m).into_owned();
    let p_unseen = protos.rows(m, v).into_owned();
    Dataset::new(x_train, y_train, p_seen, p_unseen, x_test, y_test)
}
