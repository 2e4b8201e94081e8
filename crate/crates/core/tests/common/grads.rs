//! Randomized finite-difference instances, one function per backward path.
//! Each returns the worst relative error between analytic and numeric
//! gradients.

use nalgebra::DMatrix;
use rand::Rng;
use zsl_core::gradcheck::{max_relative_error, numeric_gradient};
use zsl_core::graphzsl::{GcnModel, GcnParams};
use zsl_core::nn::{self, Mlp, MlpSpec, VaeGrads, VaeModel, VaeSpec};
use zsl_core::{amssfe, Matrix};

use super::{rng, uniform};

pub const H: f64 = 1e-5;
/// Denominator floor for entries whose true gradient is (near) zero.
pub const FLOOR: f64 = 1e-6;

fn weighted_sum(out: &Matrix, w: &Matrix) -> f64 {
    out.component_mul(w).sum()
}

/// False when a one-sided difference disagrees with the other side at some
/// coordinate, i.e. the point sits on a ReLU or absolute-value kink.
fn kink_free<F: Fn(&[Matrix]) -> f64>(f: &F, params: &[Matrix]) -> bool {
    let mut work = params.to_vec();
    let f0 = f(&work);
    for t in 0..work.len() {
        for idx in 0..work[t].len() {
            let orig = work[t][idx];
            work[t][idx] = orig + H;
            let up = (f(&work) - f0) / H;
            work[t][idx] = orig - H;
            let down = (f0 - f(&work)) / H;
            work[t][idx] = orig;
            if (up - down).abs() > 1e-3 * up.abs().max(down.abs()).max(1.0) {
                return false;
            }
        }
    }
    true
}

fn compare<F: Fn(&[Matrix]) -> f64>(f: F, params: &[Matrix], analytic: &[Matrix]) -> Option<f64> {
    if !kink_free(&f, params) {
        return None;
    }
    Some(max_relative_error(analytic, &numeric_gradient(&f, params, H), FLOOR))
}

/// First kink-free instance derived from `seed`.
fn redraw(seed: u64, instance: impl Fn(u64) -> Option<f64>) -> f64 {
    (0..64u64)
        .find_map(|k| instance(seed.wrapping_add(k << 32)))
        .expect("no kink-free instance in 64 draws")
}

fn set_params(dst: Vec<&mut Matrix>, src: &[Matrix]) {
    for (d, s) in dst.into_iter().zip(src) {
        d.copy_from(s);
    }
}

pub fn mlp(seed: u64) -> f64 {
    redraw(seed, mlp_instance)
}

fn mlp_instance(seed: u64) -> Option<f64> {
    let mut r = rng(seed);
    let depth = r.random_range(1..4);
    let mut widths = vec![r.random_range(2..6)];
    for _ in 0..depth {
        widths.push(r.random_range(2..6));
    }
    let net = Mlp::new(&MlpSpec::relu_hidden(widths.clone(), seed)).unwrap();
    let x = uniform(&mut r, 4, widths[0]);
    let proj = uniform(&mut r, 4, *widths.last().unwrap());
    let cache = net.forward(&x).unwrap();
    let (mut grads, dx) = net.backward(&cache, &proj).unwrap();
    grads.push(dx);
    let mut params: Vec<Matrix> = net.params().into_iter().cloned().collect();
    params.push(x);
    compare(
        |p| {
            let mut n = net.clone();
            set_params(n.params_mut(), &p[..p.len() - 1]);
            weighted_sum(&n.predict(&p[p.len() - 1]).unwrap(), &proj)
        },
        &params,
        &grads,
    )
}

pub fn kl(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mu = uniform(&mut r, 3, 4);
    let lv = uniform(&mut r, 3, 4);
    let (_, dmu, dlv) = nn::kl_diag_gaussian(&mu, &lv).unwrap();
    let numeric = numeric_gradient(|p| nn::kl_diag_gaussian(&p[0], &p[1]).unwrap().0, &[mu, lv], H);
    max_relative_error(&[dmu, dlv], &numeric, FLOOR)
}

pub fn vae(seed: u64) -> f64 {
    redraw(seed, vae_instance)
}

fn vae_instance(seed: u64) -> Option<f64> {
    let mut r = rng(seed);
    let d = r.random_range(3..7);
    let k = r.random_range(1..4);
    let model = VaeModel::new(&VaeSpec { input_dim: d, hidden: vec![r.random_range(3..7)], latent: k, seed }).unwrap();
    let x = uniform(&mut r, 3, d);
    let eps = uniform(&mut r, 3, k);
    let proj = uniform(&mut r, 3, k);
    let loss = |m: &VaeModel| {
        let f = m.forward(&x, &eps).unwrap();
        nn::sse(f.x_hat(), &x).0 + nn::kl_diag_gaussian(&f.mu, &f.logvar).unwrap().0 + weighted_sum(&f.z, &proj)
    };
    let f = model.forward(&x, &eps).unwrap();
    let (_, dx) = nn::sse(f.x_hat(), &x);
    let (_, dmu, dlv) = nn::kl_diag_gaussian(&f.mu, &f.logvar).unwrap();
    let grads = model
        .backward(&f, &VaeGrads { x_hat: Some(&dx), mu: Some(&dmu), logvar: Some(&dlv), z: Some(&proj) })
        .unwrap();
    let params: Vec<Matrix> = model.params().into_iter().cloned().collect();
    compare(
        |p| {
            let mut m = model.clone();
            set_params(m.params_mut(), p);
            loss(&m)
        },
        &params,
        &grads,
    )
}

pub fn alignment(seed: u64) -> f64 {
    let mut r = rng(seed);
    let m = r.random_range(2..5);
    let o = uniform(&mut r, m, 6);
    let s = uniform(&mut r, 8, 6);
    let labels: Vec<usize> = (0..8).map(|_| r.random_range(0..m)).collect();
    let (_, g) = amssfe::alignment_loss(&s, &o, &labels).unwrap();
    let numeric = numeric_gradient(|p| amssfe::alignment_loss(&p[0], &o, &labels).unwrap().0, &[s], H);
    max_relative_error(&[g], &numeric, FLOOR)
}

fn random_graph(r: &mut rand_chacha::ChaCha8Rng, p: usize) -> Matrix {
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in (i + 1)..p {
            if r.random_bool(0.5) {
                a[(i, j)] = 1.0;
                a[(j, i)] = 1.0;
            }
        }
    }
    a
}

/// Two graph convolutions on a 4-node toy, MAE through the head.
pub fn gcn(seed: u64) -> f64 {
    redraw(seed, gcn_instance)
}

fn gcn_instance(seed: u64) -> Option<f64> {
    let mut r = rng(seed);
    let a = random_graph(&mut r, 4);
    let model = GcnModel::new(
        a,
        3,
        2,
        &GcnParams { channels: vec![4, 3], head_hidden: vec![4], seed, ..Default::default() },
    )
    .unwrap();
    let graphs: Vec<Matrix> = (0..3).map(|_| uniform(&mut r, 4, 3)).collect();
    let refs: Vec<&Matrix> = graphs.iter().collect();
    let targets = uniform(&mut r, 3, 2);
    let (_, grads) = model.loss_and_grads(&refs, &targets).unwrap();
    let params: Vec<Matrix> = model.params().into_iter().cloned().collect();
    compare(
        |p| {
            let mut m = model.clone();
            set_params(m.params_mut(), p);
            nn::mae(&m.predict(&refs).unwrap(), &targets).0
        },
        &params,
        &grads,
    )
}

/// Regression head alone under MAE.
pub fn mae_head(seed: u64) -> f64 {
    redraw(seed, mae_head_instance)
}

fn mae_head_instance(seed: u64) -> Option<f64> {
    let mut r = rng(seed);
    let net = Mlp::new(&MlpSpec::relu_hidden(vec![5, 6, 6, 3], seed)).unwrap();
    let x = uniform(&mut r, 6, 5);
    let t = uniform(&mut r, 6, 3);
    let cache = net.forward(&x).unwrap();
    let (_, g) = nn::mae(&cache.output, &t);
    let (grads, _) = net.backward(&cache, &g).unwrap();
    let params: Vec<Matrix> = net.params().into_iter().cloned().collect();
    compare(
        |p| {
            let mut n = net.clone();
            set_params(n.params_mut(), p);
            nn::mae(&n.predict(&x).unwrap(), &t).0
        },
        &params,
        &grads,
    )
}

fn small_dataset(seed: u64) -> (zsl_core::Dataset, rand_chacha::ChaCha8Rng) {
    use zsl_core::dataset::{synthesize_dataset, SyntheticSpec};
    let mut r = rng(seed ^ 0x5eed);
    let n = r.random_range(2..8);
    let d = r.random_range(n..11);
    let spec = SyntheticSpec {
        m_seen: r.random_range(3..6),
        v_unseen: 2,
        d,
        n,
        examples_per_class: 4,
        noise_sigma: 0.1,
        seed,
        max_cosine: 0.99,
        nonnegative: true,
        seen_test_per_class: 0,
    };
    (synthesize_dataset(&spec).unwrap(), r)
}

/// Analytic objective gradient at a random `W`.
pub fn rectify_objective(seed: u64) -> f64 {
    use zsl_core::rectify;
    let (ds, mut r) = small_dataset(seed);
    let labels = ds.train_local_labels();
    let p_dup = zsl_core::matrix::select_rows(&ds.p_seen, &labels);
    let o_dup = uniform(&mut r, p_dup.nrows(), p_dup.ncols());
    let w = uniform(&mut r, ds.semantic_dim(), ds.visual_dim());
    let (a, b, rho) = (r.random_range(0.0..1.0), r.random_range(0.0..2.0), 0.1);
    let g = rectify::objective_gradient(&w, &ds.x_train, &p_dup, &o_dup, a, b, rho);
    let numeric = numeric_gradient(
        |p| rectify::objective(&p[0], &ds.x_train, &p_dup, &o_dup, a, b, rho),
        &[w],
        H,
    );
    max_relative_error(&[g], &numeric, FLOOR)
}

/// Trains rectify on a random small dataset and returns the max-abs central
/// difference gradient of the objective at the returned `W`, holding the
/// prototypes and centroids of the final solve fixed.
pub fn rectify_stationarity(seed: u64) -> f64 {
    use zsl_core::rectify::{self, RectifyParams};
    let (ds, _) = small_dataset(seed);
    let epochs = 3;
    let params = RectifyParams {
        k_neighbors: 2,
        max_epochs: epochs,
        conv_tol: f64::MIN_POSITIVE,
        ..Default::default()
    };
    let model = rectify::train(&ds, &params).unwrap();
    assert_eq!(model.epochs_run, epochs);
    // The centroids of the last solve come from the previous epoch's W.
    let prev = rectify::train(&ds, &RectifyParams { max_epochs: epochs - 1, ..params.clone() }).unwrap();
    let labels = ds.train_local_labels();
    let mapped = rectify::map_to_semantic(&prev.w, &ds.x_train);
    let centroids = rectify::class_centroids(&mapped, &labels, ds.num_seen()).unwrap();
    let p_dup = zsl_core::matrix::select_rows(&model.p_seen_adj, &labels);
    let o_dup = zsl_core::matrix::select_rows(&centroids, &labels);
    let numeric = numeric_gradient(
        |p| rectify::objective(&p[0], &ds.x_train, &p_dup, &o_dup, params.alpha, params.beta, params.ridge),
        &[model.w.clone()],
        H,
    );
    numeric[0].amax()
}
