//! Small dense-network substrate: MLPs with explicit reverse-mode gradients,
//! Adam, and a diagonal-Gaussian VAE.
//!
//! Batches are row-major (`batch x width`). Every parameter lives in a
//! `Matrix` so optimizers and persistence treat weights and biases alike.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Result, ZslError};
use crate::io::{self, Manifest};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(ZslError::InvalidParam(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    /// Input width first, then each layer's output width.
    pub layer_widths: Vec<usize>,
    /// One per layer.
    pub activations: Vec<Activation>,
    pub seed: u64,
}

impl MlpSpec {
    /// Relu on hidden layers, identity on the output layer.
    pub fn relu_hidden(layer_widths: Vec<usize>, seed: u64) -> Self {
        let n = layer_widths.len().saturating_sub(1);
        let mut activations = vec![Activation::Relu; n];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        MlpSpec {
            layer_widths,
            activations,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(ZslError::InvalidParam("an MLP needs at least 2 widths".into()));
        }
        if self.activations.len() != self.layer_widths.len() - 1 {
            return Err(ZslError::InvalidParam(format!(
                "{} activations for {} layers",
                self.activations.len(),
                self.layer_widths.len() - 1
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(ZslError::InvalidParam("layer widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Affine layer `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        Dense {
            weight: DMatrix::from_fn(fan_in, fan_out, |_, _| dist.sample(rng)),
            bias: DMatrix::zeros(1, fan_out),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x * &self.weight;
        for mut row in y.row_iter_mut() {
            row += &self.bias;
        }
        y
    }

    /// Returns `(dW, db, dx)` for upstream gradient `g` at the output.
    pub fn backward(&self, x: &Matrix, g: &Matrix) -> (Matrix, Matrix, Matrix) {
        let dw = x.transpose() * g;
        let db = DMatrix::from_fn(1, g.ncols(), |_, j| g.column(j).sum());
        let dx = g * self.weight.transpose();
        (dw, db, dx)
    }

    pub fn in_width(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_width(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activations: Vec<Activation>,
}

/// Activations recorded by [`Mlp::forward`]: `inputs[l]` enters layer `l`,
/// `pre[l]` is its affine output before the activation.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub inputs: Vec<Matrix>,
    pub pre: Vec<Matrix>,
    pub output: Matrix,
}

impl Mlp {
    pub fn new(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], &mut rng))
            .collect();
        Ok(Mlp {
            layers,
            activations: spec.activations.clone(),
        })
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().expect("non-empty").out_width()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_width()];
        w.extend(self.layers.iter().map(Dense::out_width));
        w
    }

    pub fn forward(&self, x: &Matrix) -> Result<MlpCache> {
        if x.ncols() != self.in_width() {
            return Err(ZslError::Shape(format!(
                "MLP input width {} vs expected {}",
                x.ncols(),
                self.in_width()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let z = layer.forward(&h);
            let out = z.map(|v| act.apply(v));
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        Ok(MlpCache {
            inputs,
            pre,
            output: h,
        })
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.output)
    }

    /// Reverse pass. Returns parameter gradients (in [`Mlp::params`] order)
    /// and the gradient with respect to the input batch.
    pub fn backward(&self, cache: &MlpCache, grad_out: &Matrix) -> Result<(Vec<Matrix>, Matrix)> {
        if cache.inputs.len() != self.layers.len() || cache.pre.len() != self.layers.len() {
            return Err(ZslError::Shape("MLP cache does not match the network".into()));
        }
        if grad_out.shape() != cache.output.shape() {
            return Err(ZslError::Shape(format!(
                "upstream gradient {:?} vs output {:?}",
                grad_out.shape(),
                cache.output.shape()
            )));
        }
        let mut grads = vec![DMatrix::zeros(0, 0); 2 * self.layers.len()];
        let mut g = grad_out.clone();
        for l in (0..self.layers.len()).rev() {
            let act = self.activations[l];
            if act != Activation::Identity {
                g.zip_apply(&cache.pre[l], |gv, z| *gv *= act.derivative(z));
            }
            let (dw, db, dx) = self.layers[l].backward(&cache.inputs[l], &g);
            grads[2 * l] = dw;
            grads[2 * l + 1] = db;
            g = dx;
        }
        Ok((grads, g))
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn save(&self, dir: &Path, name: &str, manifest: &mut Manifest) -> Result<()> {
        let widths: Vec<String> = self.widths().iter().map(usize::to_string).collect();
        let acts: Vec<&str> = self.activations.iter().map(|a| a.tag()).collect();
        manifest.set(&format!("{name}.widths"), widths.join(","));
        manifest.set(&format!("{name}.activations"), acts.join(","));
        for (i, layer) in self.layers.iter().enumerate() {
            io::save_matrix_binary(&layer.weight, dir.join(format!("{name}.{i}.weight.zslm")))?;
            io::save_matrix_binary(&layer.bias, dir.join(format!("{name}.{i}.bias.zslm")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, name: &str, manifest: &Manifest) -> Result<Self> {
        let acts = manifest
            .require(&format!("{name}.activations"))?
            .split(',')
            .map(Activation::from_tag)
            .collect::<Result<Vec<_>>>()?;
        let widths: Vec<usize> = manifest
            .require(&format!("{name}.widths"))?
            .split(',')
            .map(|w| {
                w.parse()
                    .map_err(|_| ZslError::InvalidParam(format!("bad width {w:?}")))
            })
            .collect::<Result<_>>()?;
        let mut layers = Vec::with_capacity(acts.len());
        for i in 0..acts.len() {
            let weight = io::load_matrix_binary(dir.join(format!("{name}.{i}.weight.zslm")))?;
            let bias = io::load_matrix_binary(dir.join(format!("{name}.{i}.bias.zslm")))?;
            if weight.shape() != (widths[i], widths[i + 1]) || bias.shape() != (1, widths[i + 1]) {
                return Err(ZslError::Shape(format!("{name} layer {i} does not match its manifest")));
            }
            layers.push(Dense { weight, bias });
        }
        Ok(Mlp {
            layers,
            activations: acts,
        })
    }
}

/// `½ Σ (μ² + exp(logvar) − 1 − logvar)` summed over every entry, with its
/// gradients with respect to `mu` and `logvar`.
pub fn kl_diag_gaussian(mu: &Matrix, logvar: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    if mu.shape() != logvar.shape() {
        return Err(ZslError::Shape(format!(
            "mu {:?} vs logvar {:?}",
            mu.shape(),
            logvar.shape()
        )));
    }
    let value = 0.5
        * mu
            .iter()
            .zip(logvar.iter())
            .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
            .sum::<f64>();
    let dmu = mu.clone();
    let dlogvar = logvar.map(|lv| 0.5 * (lv.exp() - 1.0));
    Ok((value, dmu, dlogvar))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Matrix]) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|p| DMatrix::zeros(p.nrows(), p.ncols()))
            .collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update in place.
    pub fn update(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(ZslError::Shape(format!(
                "Adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || g.shape() != self.m[i].shape() {
                return Err(ZslError::Shape(format!("Adam tensor {i} shape mismatch")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(ZslError::Numerical(format!(
                    "non-finite gradient in tensor {i} at step {}",
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((pv, &gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeSpec {
    pub input_dim: usize,
    /// Encoder trunk widths (the decoder mirrors them).
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub seed: u64,
}

/// Encoder trunk with `mu`/`logvar` heads and a mirrored decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub trunk: Mlp,
    pub mu_head: Dense,
    pub logvar_head: Dense,
    pub decoder: Mlp,
    pub latent: usize,
}

#[derive(Debug, Clone)]
pub struct VaeForward {
    pub trunk: MlpCache,
    pub mu: Matrix,
    pub logvar: Matrix,
    pub eps: Matrix,
    pub z: Matrix,
    pub decoder: MlpCache,
}

impl VaeForward {
    pub fn x_hat(&self) -> &Matrix {
        &self.decoder.output
    }
}

/// Upstream gradients entering a VAE backward pass. `None` means zero.
#[derive(Debug, Clone, Default)]
pub struct VaeGrads<'a> {
    pub x_hat: Option<&'a Matrix>,
    pub mu: Option<&'a Matrix>,
    pub logvar: Option<&'a Matrix>,
    pub z: Option<&'a Matrix>,
}

impl VaeModel {
    pub fn new(spec: &VaeSpec) -> Result<Self> {
        if spec.hidden.is_empty() {
            return Err(ZslError::InvalidParam("VAE needs at least one hidden layer".into()));
        }
        if spec.latent == 0 || spec.input_dim == 0 {
            return Err(ZslError::InvalidParam("VAE widths must be >= 1".into()));
        }
        let mut enc_widths = vec![spec.input_dim];
        enc_widths.extend(&spec.hidden);
        let trunk = Mlp::new(&MlpSpec {
            activations: vec![Activation::Relu; spec.hidden.len()],
            layer_widths: enc_widths,
            seed: spec.seed,
        })?;
        let h = *spec.hidden.last().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
        let mu_head = Dense::init(h, spec.latent, &mut rng);
        let logvar_head = Dense::init(h, spec.latent, &mut rng);
        let mut dec_widths = vec![spec.latent];
        dec_widths.extend(spec.hidden.iter().rev());
        dec_widths.push(spec.input_dim);
        let decoder = Mlp::new(&MlpSpec::relu_hidden(dec_widths, spec.seed.wrapping_add(2)))?;
        Ok(VaeModel {
            trunk,
            mu_head,
            logvar_head,
            decoder,
            latent: spec.latent,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.in_width()
    }

    /// Encoder means and log-variances.
    pub fn encode(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let h = self.trunk.predict(x)?;
        Ok((self.mu_head.forward(&h), self.logvar_head.forward(&h)))
    }

    /// `z = mu + exp(logvar/2) ⊙ eps`, `x̂ = decoder(z)`.
    pub fn forward(&self, x: &Matrix, eps: &Matrix) -> Result<VaeForward> {
        let trunk = self.trunk.forward(x)?;
        let mu = self.mu_head.forward(&trunk.output);
        let logvar = self.logvar_head.forward(&trunk.output);
        if eps.shape() != mu.shape() {
            return Err(ZslError::Shape(format!(
                "eps {:?} vs latent batch {:?}",
                eps.shape(),
                mu.shape()
            )));
        }
        let mut z = mu.clone();
        for ((zv, &lv), &e) in z.iter_mut().zip(logvar.iter()).zip(eps.iter()) {
            *zv += (0.5 * lv).exp() * e;
        }
        let decoder = self.decoder.forward(&z)?;
        Ok(VaeForward {
            trunk,
            mu,
            logvar,
            eps: eps.clone(),
            z,
            decoder,
        })
    }

    /// Parameter gradients in [`VaeModel::params`] order.
    pub fn backward(&self, fwd: &VaeForward, up: &VaeGrads<'_>) -> Result<Vec<Matrix>> {
        let zeros_like = |m: &Matrix| DMatrix::zeros(m.nrows(), m.ncols());
        let d_xhat = up.x_hat.cloned().unwrap_or_else(|| zeros_like(fwd.x_hat()));
        let (dec_grads, mut d_z) = self.decoder.backward(&fwd.decoder, &d_xhat)?;
        if let Some(g) = up.z {
            d_z += g;
        }
        let mut d_mu = d_z.clone();
        if let Some(g) = up.mu {
            d_mu += g;
        }
        let mut d_logvar = zeros_like(&fwd.logvar);
        for (((dl, &dz), &lv), &e) in d_logvar
            .iter_mut()
            .zip(d_z.iter())
            .zip(fwd.logvar.iter())
            .zip(fwd.eps.iter())
        {
            *dl = dz * e * 0.5 * (0.5 * lv).exp();
        }
        if let Some(g) = up.logvar {
            d_logvar += g;
        }
        let h = &fwd.trunk.output;
        let (dw_mu, db_mu, dh_mu) = self.mu_head.backward(h, &d_mu);
        let (dw_lv, db_lv, dh_lv) = self.logvar_head.backward(h, &d_logvar);
        let (trunk_grads, _) = self.trunk.backward(&fwd.trunk, &(dh_mu + dh_lv))?;
        let mut grads = trunk_grads;
        grads.extend([dw_mu, db_mu, dw_lv, db_lv]);
        grads.extend(dec_grads);
        Ok(grads)
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = self.trunk.params();
        p.extend([
            &self.mu_head.weight,
            &self.mu_head.bias,
            &self.logvar_head.weight,
            &self.logvar_head.bias,
        ]);
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.trunk.params_mut();
        p.extend([
            &mut self.mu_head.weight,
            &mut self.mu_head.bias,
            &mut self.logvar_head.weight,
            &mut self.logvar_head.bias,
        ]);
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn save(&self, dir: &Path, manifest: &mut Manifest) -> Result<()> {
        self.trunk.save(dir, "vae.trunk", manifest)?;
        self.decoder.save(dir, "vae.decoder", manifest)?;
        io::save_matrix_binary(&self.mu_head.weight, dir.join("vae.mu.weight.zslm"))?;
        io::save_matrix_binary(&self.mu_head.bias, dir.join("vae.mu.bias.zslm"))?;
        io::save_matrix_binary(&self.logvar_head.weight, dir.join("vae.logvar.weight.zslm"))?;
        io::save_matrix_binary(&self.logvar_head.bias, dir.join("vae.logvar.bias.zslm"))?;
        manifest.set("vae.latent", self.latent);
        Ok(())
    }

    pub fn load(dir: &Path, manifest: &Manifest) -> Result<Self> {
        Ok(VaeModel {
            trunk: Mlp::load(dir, "vae.trunk", manifest)?,
            decoder: Mlp::load(dir, "vae.decoder", manifest)?,
            mu_head: Dense {
                weight: io::load_matrix_binary(dir.join("vae.mu.weight.zslm"))?,
                bias: io::load_matrix_binary(dir.join("vae.mu.bias.zslm"))?,
            },
            logvar_head: Dense {
                weight: io::load_matrix_binary(dir.join("vae.logvar.weight.zslm"))?,
                bias: io::load_matrix_binary(dir.join("vae.logvar.bias.zslm"))?,
            },
            latent: manifest.parse_value("vae.latent")?,
        })
    }
}

/// Sum of squared errors and its gradient with respect to `pred`.
pub fn sse(pred: &Matrix, target: &Matrix) -> (f64, Matrix) {
    let diff = pred - target;
    (diff.norm_squared(), diff * 2.0)
}

/// Mean absolute error over every entry and its (sub)gradient.
pub fn mae(pred: &Matrix, target: &Matrix) -> (f64, Matrix) {
    let diff = pred - target;
    let n = diff.len() as f64;
    let value = diff.iter().map(|v| v.abs()).sum::<f64>() / n;
    let grad = diff.map(|v| v.signum() / n);
    (value, grad)
}
