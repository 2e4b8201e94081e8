mod common;

use std::collections::BTreeMap;

use common::{kronecker_oracle, rng, uniform};
use nalgebra::DMatrix;
use rand::Rng;
use zsl_core::amssfe::{self, ExpansionParams, MappingParams};
use zsl_core::dataset::{load_dataset, save_dataset, synthesize_dataset, SyntheticSpec};
use zsl_core::eval::{self, Scope};
use zsl_core::graphzsl::{self, GcnModel, GcnParams, GraphSynthSpec, LogisticRegression};
use zsl_core::linalg::{self, SylvesterProblem};
use zsl_core::nn::{self, Activation, AdamConfig, AdamState, Mlp, MlpSpec, VaeGrads, VaeModel, VaeSpec};
use zsl_core::{matrix, rectify, Matrix};

#[test]
fn sylvester_matches_elimination_oracle() {
    let mut r = rng(1);
    let l = uniform(&mut r, 8, 8) + DMatrix::identity(8, 8) * 3.0;
    let rr = uniform(&mut r, 6, 6) + DMatrix::identity(6, 6) * 3.0;
    let m = uniform(&mut r, 8, 6);
    let w = linalg::solve_sylvester(&SylvesterProblem::new(l.clone(), rr.clone(), m.clone()).unwrap()).unwrap();
    let oracle = kronecker_oracle(&l, &rr, &m);
    assert!((w - oracle).amax() < 1e-6);
}

#[test]
fn sym_eig_reconstructs_random_symmetric() {
    let mut r = rng(2);
    let a = uniform(&mut r, 12, 12);
    let b = &a + a.transpose();
    let e = linalg::sym_eig(&b).unwrap();
    assert!((e.reconstruct() - &b).norm() <= 1e-9 * b.norm());
}

#[test]
fn least_squares_recovers_planted_solution() {
    let mut r = rng(3);
    let a = uniform(&mut r, 10, 4);
    let x = uniform(&mut r, 4, 1);
    let got = linalg::least_squares(&a, &(&a * &x)).unwrap();
    assert!((got - x).amax() < 1e-9);
}

fn mlp_loop_oracle(mlp: &Mlp, x: &Matrix) -> Matrix {
    let mut rows = Vec::new();
    for i in 0..x.nrows() {
        let mut h: Vec<f64> = x.row(i).iter().copied().collect();
        for (layer, act) in mlp.layers.iter().zip(&mlp.activations) {
            let mut out = vec![0.0; layer.out_width()];
            for (j, o) in out.iter_mut().enumerate() {
                let mut s = layer.bias[(0, j)];
                for (k, hv) in h.iter().enumerate() {
                    s += hv * layer.weight[(k, j)];
                }
                *o = match act {
                    Activation::Relu => s.max(0.0),
                    Activation::Identity => s,
                };
            }
            h = out;
        }
        rows.push(h);
    }
    matrix::from_rows(&rows).unwrap()
}

#[test]
fn mlp_forward_matches_neuron_loop() {
    let mut r = rng(4);
    let mlp = Mlp::new(&MlpSpec::relu_hidden(vec![5, 7, 6, 3], 11)).unwrap();
    let x = uniform(&mut r, 9, 5);
    let got = mlp.predict(&x).unwrap();
    assert!((got - mlp_loop_oracle(&mlp, &x)).amax() < 1e-12);
}

#[test]
fn adam_converges_on_convex_quadratic() {
    // f(w) = Σ c_i (w_i − t_i)²
    let target = matrix::from_rows(&[vec![0.3, -0.7, 1.2]]).unwrap();
    let curv = [1.0, 3.0, 0.5];
    let mut w = DMatrix::zeros(1, 3);
    let mut adam = AdamState::new(AdamConfig { lr: 0.05, ..Default::default() }, &[&w]);
    for _ in 0..500 {
        let g = DMatrix::from_fn(1, 3, |_, j| 2.0 * curv[j] * (w[(0, j)] - target[(0, j)]));
        adam.update(vec![&mut w], &[g]).unwrap();
    }
    assert!((w - target).amax() < 1e-3);
}

#[test]
fn vae_forward_is_deterministic_under_seed() {
    let spec = VaeSpec { input_dim: 6, hidden: vec![8], latent: 3, seed: 5 };
    let x = uniform(&mut rng(6), 4, 6);
    let eps = uniform(&mut rng(7), 4, 3);
    let a = VaeModel::new(&spec).unwrap().forward(&x, &eps).unwrap();
    let b = VaeModel::new(&spec).unwrap().forward(&x, &eps).unwrap();
    assert_eq!(a.x_hat(), b.x_hat());
    assert_eq!(a.z, b.z);
}

fn brute_force_rank(s: &Matrix, p: &Matrix, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for i in 0..s.nrows() {
        let mut sims = Vec::new();
        for j in 0..p.nrows() {
            let mut dot = 0.0;
            let mut ns = 0.0;
            let mut np = 0.0;
            for c in 0..s.ncols() {
                dot += s[(i, c)] * p[(j, c)];
                ns += s[(i, c)] * s[(i, c)];
                np += p[(j, c)] * p[(j, c)];
            }
            sims.push((dot / (ns.sqrt() * np.sqrt()), j));
        }
        // stable sort keeps ascending index among ties
        sims.sort_by(|a, b| b.0.total_cmp(&a.0));
        out.push(sims.iter().take(k).map(|x| x.1).collect());
    }
    out
}

#[test]
fn nearest_prototypes_matches_double_loop() {
    let mut r = rng(8);
    let s = uniform(&mut r, 40, 6);
    let p = uniform(&mut r, 9, 6);
    assert_eq!(eval::nearest_prototypes(&s, &p, 9).unwrap(), brute_force_rank(&s, &p, 9));
}

#[test]
fn per_class_accuracy_matches_counting() {
    let mut r = rng(9);
    let classes: Vec<usize> = vec![2, 5, 7, 11];
    let truths: Vec<usize> = (0..500).map(|_| classes[r.random_range(0..4)]).collect();
    let preds: Vec<usize> = (0..500).map(|_| classes[r.random_range(0..4)]).collect();
    let mut expected = BTreeMap::new();
    for &c in &classes {
        let idx: Vec<usize> = (0..500).filter(|&i| truths[i] == c).collect();
        let hits = idx.iter().filter(|&&i| preds[i] == c).count();
        expected.insert(c, hits as f64 / idx.len() as f64);
    }
    assert_eq!(eval::per_class_accuracy(&preds, &truths, &classes), expected);
}

#[test]
fn uniform_predictions_give_flat_confusion() {
    let mut r = rng(10);
    let classes: Vec<usize> = (0..5).collect();
    let truths: Vec<usize> = (0..10_000).map(|i| i % 5).collect();
    let preds: Vec<usize> = (0..10_000).map(|_| r.random_range(0..5)).collect();
    let cm = eval::confusion_matrix(&preds, &truths, &classes);
    assert!(cm.iter().all(|&v| (v - 0.2).abs() < 0.05));
}

#[test]
fn class_centers_match_loop() {
    let mut r = rng(11);
    let x = uniform(&mut r, 30, 4);
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let got = amssfe::class_centers_visual(&x, &labels, 3).unwrap();
    for c in 0..3 {
        for j in 0..4 {
            let vals: Vec<f64> = (0..30).filter(|i| labels[*i] == c).map(|i| x[(i, j)]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((got[(c, j)] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn mds_recovers_planted_points() {
    let mut r = rng(12);
    let pts = common::points(&mut r, 12, 3);
    let d = linalg::pairwise_distances(&pts);
    let em = amssfe::extract_embedded_manifold(&d, 3).unwrap();
    assert!((linalg::pairwise_distances(&em.o) - d).amax() < 1e-8);
}

#[test]
fn unseen_expansion_midpoint() {
    let mut r = rng(13);
    let p_seen = uniform(&mut r, 2, 5);
    let exp = uniform(&mut r, 2, 3);
    let mid = (p_seen.rows(0, 1) + p_seen.rows(1, 1)) * 0.5;
    let got = amssfe::update_unseen_prototypes(&mid, &p_seen, &exp, 2).unwrap();
    let want = (exp.rows(0, 1) + exp.rows(1, 1)) * 0.5;
    assert!((got.columns(5, 3) - want).amax() < 1e-9);
}

#[test]
fn dataset_reingests_synthesized_layout() {
    let ds = synthesize_dataset(&SyntheticSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.visual_dim(), 64);
    assert_eq!(back, ds);
}

#[test]
fn mapping_reconstruction_beats_mean() {
    let ds = synthesize_dataset(&SyntheticSpec::default()).unwrap();
    let ae = amssfe::train_baseline(&ds, &MappingParams::default()).unwrap();
    let rec = ae.reconstruct(&ds.x_train).unwrap();
    let mse = (rec - &ds.x_train).norm_squared() / ds.x_train.len() as f64;
    let mean = matrix::column_means(&ds.x_train);
    let mut var = 0.0;
    for row in ds.x_train.row_iter() {
        var += (row - &mean).norm_squared();
    }
    var /= ds.x_train.len() as f64;
    assert!(mse < var, "mse {mse} vs variance {var}");
}

#[test]
fn mapping_is_deterministic() {
    let ds = synthesize_dataset(&SyntheticSpec::default()).unwrap();
    let a = amssfe::train_baseline(&ds, &MappingParams::default()).unwrap();
    let b = amssfe::train_baseline(&ds, &MappingParams::default()).unwrap();
    assert_eq!(a, b);
}

fn small_expansion(beta: f64) -> ExpansionParams {
    ExpansionParams {
        beta,
        hidden: vec![16],
        epochs: 15,
        patience: 0,
        seed: 3,
        ..Default::default()
    }
}

/// Reference VAE loop with no alignment machinery at all.
fn plain_vae_reconstruction(ds: &zsl_core::Dataset, p: &ExpansionParams) -> f64 {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let k = p.resolved_k(ds.semantic_dim());
    let mut vae = VaeModel::new(&VaeSpec { input_dim: ds.visual_dim(), hidden: p.hidden.clone(), latent: k, seed: p.seed }).unwrap();
    let mut adam = AdamState::new(AdamConfig { lr: p.lr, ..Default::default() }, &vae.params());
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(p.seed ^ 0x00a1_1a9e);
    let mut order: Vec<usize> = (0..ds.x_train.nrows()).collect();
    let mut last = 0.0;
    for _ in 0..p.epochs {
        order.shuffle(&mut r);
        let mut rec_sum = 0.0;
        for batch in order.chunks(p.batch_size) {
            let xb = matrix::select_rows(&ds.x_train, batch);
            let eps = DMatrix::from_fn(batch.len(), k, |_, _| StandardNormal.sample(&mut r));
            let f = vae.forward(&xb, &eps).unwrap();
            let (rec, dx) = nn::sse(f.x_hat(), &xb);
            let (_, dmu, dlv) = nn::kl_diag_gaussian(&f.mu, &f.logvar).unwrap();
            let s = p.alpha / batch.len() as f64;
            let g = vae
                .backward(&f, &VaeGrads { x_hat: Some(&(dx * s)), mu: Some(&(dmu * s)), logvar: Some(&(dlv * s)), z: None })
                .unwrap();
            adam.update(vae.params_mut(), &g).unwrap();
            rec_sum += rec;
        }
        last = rec_sum / ds.x_train.nrows() as f64;
    }
    last
}

#[test]
fn zero_beta_expansion_is_a_plain_vae() {
    let ds = synthesize_dataset(&SyntheticSpec { examples_per_class: 8, ..Default::default() }).unwrap();
    let p = small_expansion(0.0);
    let model = amssfe::train_expansion(&ds, &p).unwrap();
    let ours = model.history.last().unwrap().reconstruction;
    let plain = plain_vae_reconstruction(&ds, &p);
    assert!((ours - plain).abs() <= 0.05 * plain, "{ours} vs {plain}");
}

#[test]
fn amssfe_recognition_matches_brute_force() {
    let ds = synthesize_dataset(&SyntheticSpec { examples_per_class: 8, ..Default::default() }).unwrap();
    let model = amssfe::train(
        &ds,
        &amssfe::AmssfeParams { expansion: small_expansion(77.0), mapping: MappingParams::default() },
    )
    .unwrap();
    let e = &model.expansion;
    let got = amssfe::recognize(&model.mapping, &ds.x_test, &e.p_seen_combined, &e.p_unseen_combined, Scope::Gzsl, 5).unwrap();
    let s = model.mapping.encode(&ds.x_test).unwrap();
    let all = matrix::vconcat(&e.p_seen_combined, &e.p_unseen_combined).unwrap();
    assert_eq!(got, brute_force_rank(&s, &all, 5));
}

#[test]
fn amssfe_planted_noise_free_unseen_ranked_first() {
    let ds = synthesize_dataset(&SyntheticSpec { noise_sigma: 0.0, examples_per_class: 4, ..Default::default() }).unwrap();
    let ae = amssfe::train_baseline(&ds, &MappingParams::default()).unwrap();
    let r = amssfe::recognize(&ae, &ds.x_test, &ds.p_seen, &ds.p_unseen, Scope::Czsl, 1).unwrap();
    let truths: Vec<usize> = ds.y_test.iter().map(|&c| ds.unseen_position(c).unwrap()).collect();
    assert_eq!(eval::hit_at_k(&r, &truths, 1).unwrap(), 1.0);
}

#[test]
fn rectify_rankings_match_brute_force() {
    let ds = synthesize_dataset(&SyntheticSpec { examples_per_class: 10, ..Default::default() }).unwrap();
    let model = rectify::train(&ds, &rectify::RectifyParams::default()).unwrap();
    let got = rectify::infer_v2s(&model, &ds.x_test, &model.p_unseen_adj, 5).unwrap();
    let s = rectify::map_to_semantic(&model.w, &ds.x_test);
    assert_eq!(got, brute_force_rank(&s, &model.p_unseen_adj, 5));
}

/// `relu(D^{-1/2} (A + I) D^{-1/2} H θ)` through separate steps.
fn gcn_decoupled(a: &Matrix, h: &Matrix, theta: &Matrix) -> Matrix {
    let p = a.nrows();
    let mut with_loops = a.clone();
    for i in 0..p {
        with_loops[(i, i)] += 1.0;
    }
    let deg: Vec<f64> = (0..p).map(|i| (0..p).map(|j| with_loops[(i, j)]).sum()).collect();
    let scaled_rows = DMatrix::from_fn(p, h.ncols(), |i, c| h[(i, c)] / deg[i].sqrt());
    let mut gathered = DMatrix::<f64>::zeros(p, h.ncols());
    for i in 0..p {
        for j in 0..p {
            if with_loops[(i, j)] != 0.0 {
                for c in 0..h.ncols() {
                    gathered[(i, c)] += scaled_rows[(j, c)];
                }
            }
        }
    }
    let normalized = DMatrix::from_fn(p, h.ncols(), |i, c| gathered[(i, c)] / deg[i].sqrt());
    (normalized * theta).map(|v| v.max(0.0))
}

pub fn random_adjacency(r: &mut rand_chacha::ChaCha8Rng, p: usize) -> Matrix {
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in (i + 1)..p {
            if r.random_bool(0.4) {
                a[(i, j)] = 1.0;
                a[(j, i)] = 1.0;
            }
        }
    }
    a
}

#[test]
fn gcn_layer_matches_decoupled_oracle() {
    let mut r = rng(14);
    for _ in 0..20 {
        let a = random_adjacency(&mut r, 7);
        let h = uniform(&mut r, 7, 5);
        let theta = uniform(&mut r, 5, 4);
        let got = graphzsl::gcn_layer(&a, &h, &theta).unwrap();
        assert!((got - gcn_decoupled(&a, &h, &theta)).amax() < 1e-12);
    }
}

#[test]
fn informative_pair_beats_its_parts() {
    let gd = graphzsl::synthesize_graph_dataset(&GraphSynthSpec::default()).unwrap();
    let labels = gd.base.train_local_labels();
    let clf = LogisticRegression::fit(&gd.base.x_train, &labels, gd.base.num_seen(), &Default::default()).unwrap();
    let c = graphzsl::part_pair_confidence(&clf, &gd.parts_train, &labels).unwrap();
    assert!(c[(0, 1)] > c[(0, 0)] && c[(0, 1)] > c[(1, 1)]);
    assert!(c[(2, 3)] > c[(2, 2)] && c[(2, 3)] > c[(3, 3)]);
}

#[test]
fn gcn_memorizes_one_graph() {
    let mut r = rng(15);
    let a = random_adjacency(&mut r, 5);
    let f = uniform(&mut r, 5, 4);
    let target = uniform(&mut r, 1, 3);
    let model = graphzsl::gcn_train(
        a,
        &[f],
        &target,
        &GcnParams { channels: vec![16, 16], head_hidden: vec![16], epochs: 3000, batch_size: 1, lr: 3e-3, seed: 1 },
    )
    .unwrap();
    assert!(*model.history.last().unwrap() < 1e-3, "final MAE {}", model.history.last().unwrap());
}

#[test]
fn graph_recognition_matches_brute_force() {
    let mut spec = GraphSynthSpec::default();
    spec.base.examples_per_class = 3;
    let gd = graphzsl::synthesize_graph_dataset(&spec).unwrap();
    let mut r = rng(16);
    let model = GcnModel::new(
        random_adjacency(&mut r, 8),
        gd.parts_train[0].ncols(),
        gd.base.semantic_dim(),
        &GcnParams { channels: vec![8, 8], head_hidden: vec![8], ..Default::default() },
    )
    .unwrap();
    let got = graphzsl::recognize_graph(&model, &gd.parts_test, &gd.base.p_seen, &gd.base.p_unseen, Scope::Czsl, 3).unwrap();
    let refs: Vec<&Matrix> = gd.parts_test.iter().collect();
    let s = model.predict(&refs).unwrap();
    assert_eq!(got, brute_force_rank(&s, &gd.base.p_unseen, 3));
}
