//! The two generative models: a free-standing low-rank Gaussian with no
//! network ([`DistOnlyModel`]) and a dense VAE whose three-headed decoder
//! emits one ([`VaeModel`]). Both expose the same training objective: batch
//! averages of the negative log-likelihood, the latent KL and the entropy of
//! the observation distribution, with gradients for any weighting of them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{EntropyGrad, LogProbGrad, LowRankGaussian};
use crate::nn::{Dense, Mlp, ParamLayout};
use crate::random::{standard_normal_matrix, standard_normal_vector};

/// Diagonal covariance used in ε-mode.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Factorised Gaussian posterior `q(z|x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: DVector<f64>,
    pub log_var: DVector<f64>,
}

impl DiagonalGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `z = mean + exp(½ log_var) ⊙ eps`.
pub fn reparameterize(q: &DiagonalGaussian, eps: &DVector<f64>) -> Result<DVector<f64>> {
    if eps.len() != q.dim() || q.log_var.len() != q.dim() {
        return Err(Error::dim("latent noise", q.dim(), eps.len()));
    }
    Ok(DVector::from_fn(q.dim(), |i, _| q.mean[i] + (0.5 * q.log_var[i]).exp() * eps[i]))
}

/// `KL(q ‖ N(0, I)) = ½ Σ (exp(lv) + m² − 1 − lv)`.
pub fn kl_to_standard_normal(q: &DiagonalGaussian) -> f64 {
    q.mean
        .iter()
        .zip(q.log_var.iter())
        .map(|(m, lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
        .sum()
}

/// Batch-averaged loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub nll: f64,
    pub kl: f64,
    pub entropy: f64,
    /// Mean over pixels and batch of the marginal variance `dᵢ + ‖Pᵢ‖²`.
    pub pixel_variance: f64,
}

/// Coefficients of each term in the scalar being differentiated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub nll: f64,
    pub kl: f64,
    pub entropy: f64,
}

impl TermWeights {
    pub const NLL: Self = Self {
        nll: 1.0,
        kl: 0.0,
        entropy: 0.0,
    };

    pub fn combine(&self, terms: &ElboTerms) -> f64 {
        self.nll * terms.nll + self.kl * terms.kl + self.entropy * terms.entropy
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeState {
    pub factor_head: bool,
    pub diag_head: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub rank: usize,
    /// Encoder widths; the decoder trunk mirrors them.
    pub hidden: Vec<usize>,
    pub epsilon_mode: bool,
    pub epsilon: f64,
}

/// Dense encoder and three-headed decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    config: VaeConfig,
    layout: ParamLayout,
    params: Vec<f64>,
    encoder: Mlp,
    trunk: Mlp,
    mean_head: Dense,
    factor_head: Dense,
    diag_head: Dense,
    freeze: FreezeState,
}

/// Head outputs for a batch, one column per latent.
struct DecodedBatch {
    trunk: crate::nn::MlpTrace,
    dists: Vec<LowRankGaussian>,
}

impl VaeModel {
    /// Architecture only, all parameters zero.
    pub fn zeroed(config: VaeConfig) -> Result<Self> {
        let VaeConfig {
            input_dim,
            latent_dim,
            rank,
            ..
        } = config;
        if input_dim == 0 || latent_dim == 0 {
            return Err(Error::InvalidArgument("input and latent dimensions must be positive".into()));
        }
        if rank > input_dim {
            return Err(Error::InvalidArgument(format!("rank {rank} exceeds input dimension {input_dim}")));
        }
        if config.epsilon_mode && !(config.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        let mut layout = ParamLayout::default();
        let mut enc_widths = vec![input_dim];
        enc_widths.extend(&config.hidden);
        enc_widths.push(2 * latent_dim);
        let encoder = Mlp::new(&mut layout, "encoder", &enc_widths, false);

        let mut trunk_widths = vec![latent_dim];
        trunk_widths.extend(config.hidden.iter().rev());
        let trunk = Mlp::new(&mut layout, "decoder.trunk", &trunk_widths, true);
        let features = *trunk_widths.last().unwrap();

        let mean_head = Dense::new(&mut layout, "decoder.mean_head", features, input_dim);
        let factor_head = Dense::new(&mut layout, "decoder.factor_head", features, input_dim * rank);
        let diag_head = Dense::new(&mut layout, "decoder.diag_head", features, input_dim);
        let params = vec![0.0; layout.len()];
        let freeze = FreezeState {
            factor_head: false,
            diag_head: config.epsilon_mode,
        };
        Ok(Self {
            config,
            layout,
            params,
            encoder,
            trunk,
            mean_head,
            factor_head,
            diag_head,
            freeze,
        })
    }

    /// Uniform fan-in trunks, a mean head that starts at `data_mean`, a zero
    /// factor head and a diagonal head that starts at `init_log_var`.
    pub fn new<R: Rng + ?Sized>(
        config: VaeConfig,
        rng: &mut R,
        data_mean: Option<&DVector<f64>>,
        init_log_var: f64,
    ) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        let (layout, params) = (&model.layout, &mut model.params);
        model.encoder.init_uniform(layout, params, rng);
        model.trunk.init_uniform(layout, params, rng);
        model.mean_head.init_uniform(layout, params, rng, 0.01);
        match data_mean {
            Some(mean) => {
                if mean.len() != model.config.input_dim {
                    return Err(Error::dim("data mean", model.config.input_dim, mean.len()));
                }
                model.mean_head.set_bias(layout, params, mean);
            }
            None => model.mean_head.fill_bias(layout, params, 0.5),
        }
        model.factor_head.fill(layout, params, 0.0, 0.0);
        model.diag_head.fill(layout, params, 0.0, init_log_var);
        Ok(model)
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn freeze(&self) -> FreezeState {
        self.freeze
    }

    /// The diagonal head stays frozen in ε-mode whatever is requested.
    pub fn set_freeze(&mut self, freeze: FreezeState) {
        self.freeze = FreezeState {
            factor_head: freeze.factor_head,
            diag_head: freeze.diag_head || self.config.epsilon_mode,
        };
    }

    pub fn encoder_output_layer(&self) -> &Dense {
        self.encoder.layers.last().expect("encoder has at least one layer")
    }

    /// Give an all-zero factor head small random weights. `P = 0` is a
    /// stationary point of the likelihood, so gradients alone never move it.
    /// Returns false and leaves the rng alone if the head is already nonzero.
    pub fn seed_factor_head<R: Rng + ?Sized>(&mut self, rng: &mut R, gain: f64) -> bool {
        let weights = self.layout.block(self.factor_head.weight).range();
        let bias = self.layout.block(self.factor_head.bias).range();
        if self.params[weights.clone()].iter().chain(&self.params[bias.clone()]).any(|&v| v != 0.0) {
            return false;
        }
        self.factor_head.init_uniform(&self.layout, &mut self.params, rng, gain);
        true
    }

    pub fn factor_head(&self) -> &Dense {
        &self.factor_head
    }

    pub fn diag_head(&self) -> &Dense {
        &self.diag_head
    }

    /// Which flat parameters the optimizer may touch.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.layout.len()];
        let mut freeze_head = |head: &Dense| {
            for id in [head.weight, head.bias] {
                mask[self.layout.block(id).range()].fill(false);
            }
        };
        if self.freeze.factor_head {
            freeze_head(&self.factor_head);
        }
        if self.freeze.diag_head {
            freeze_head(&self.diag_head);
        }
        mask
    }

    fn check_batch(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.config.input_dim {
            return Err(Error::dim("image width", self.config.input_dim, x.nrows()));
        }
        Ok(())
    }

    fn encode_matrix(&self, x: &DMatrix<f64>) -> crate::nn::MlpTrace {
        self.encoder.forward(&self.layout, &self.params, x)
    }

    /// Posterior for every column of `x` (shape `S × batch`).
    pub fn encode(&self, x: &DMatrix<f64>) -> Result<Vec<DiagonalGaussian>> {
        self.check_batch(x)?;
        let out = self.encode_matrix(x).output;
        let l = self.config.latent_dim;
        Ok(out
            .column_iter()
            .map(|col| DiagonalGaussian {
                mean: col.rows(0, l).into_owned(),
                log_var: col.rows(l, l).into_owned(),
            })
            .collect())
    }

    fn decode_matrix(&self, z: &DMatrix<f64>) -> Result<DecodedBatch> {
        let (s, r) = (self.config.input_dim, self.config.rank);
        let trunk = self.trunk.forward(&self.layout, &self.params, z);
        let features = &trunk.output;
        let mu = self.mean_head.forward(&self.layout, &self.params, features);
        let factor = self.factor_head.forward(&self.layout, &self.params, features);
        let log_diag = (!self.config.epsilon_mode).then(|| self.diag_head.forward(&self.layout, &self.params, features));
        let mut dists = Vec::with_capacity(z.ncols());
        for b in 0..z.ncols() {
            let p = DMatrix::from_fn(s, r, |i, k| factor[(i * r + k, b)]);
            let mean = mu.column(b).into_owned();
            let dist = match &log_diag {
                Some(ld) => LowRankGaussian::new(mean, p, ld.column(b).map(f64::exp))?,
                None => LowRankGaussian::with_constant_diag(mean, p, self.config.epsilon)?,
            };
            dists.push(dist);
        }
        Ok(DecodedBatch { trunk, dists })
    }

    pub fn decode(&self, z: &DVector<f64>) -> Result<LowRankGaussian> {
        if z.len() != self.config.latent_dim {
            return Err(Error::dim("latent", self.config.latent_dim, z.len()));
        }
        let zm = DMatrix::from_column_slice(z.len(), 1, z.as_slice());
        Ok(self.decode_matrix(&zm)?.dists.pop().expect("one column decoded"))
    }

    /// Decode a draw from the latent prior.
    pub fn decode_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LowRankGaussian> {
        let z = standard_normal_vector(rng, self.config.latent_dim);
        self.decode(&z)
    }

    /// Single-sample SGVB estimate of the loss terms. `eps` is `L × batch`.
    pub fn elbo_terms(&self, x: &DMatrix<f64>, eps: &DMatrix<f64>) -> Result<ElboTerms> {
        self.objective(x, eps, |_| TermWeights::NLL).map(|(terms, _)| terms)
    }

    /// Loss terms and the gradient of `weights(terms) · terms` with respect to
    /// every parameter. Frozen heads act as constants: no gradient reaches
    /// them or flows through them.
    pub fn objective(
        &self,
        x: &DMatrix<f64>,
        eps: &DMatrix<f64>,
        weights: impl FnOnce(&ElboTerms) -> TermWeights,
    ) -> Result<(ElboTerms, Vec<f64>)> {
        self.check_batch(x)?;
        let (s, l, r) = (self.config.input_dim, self.config.latent_dim, self.config.rank);
        let batch = x.ncols();
        if batch == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if eps.nrows() != l || eps.ncols() != batch {
            return Err(Error::dim("latent noise rows", l, eps.nrows()));
        }

        let enc = self.encode_matrix(x);
        let mean = enc.output.rows(0, l).into_owned();
        let log_var = enc.output.rows(l, l).into_owned();
        let std = log_var.map(|lv| (0.5 * lv).exp());
        let z = &mean + std.component_mul(eps);
        let decoded = self.decode_matrix(&z)?;

        let mut nll = 0.0;
        let mut kl = 0.0;
        let mut entropy = 0.0;
        let mut pixel_variance = 0.0;
        let mut per_sample: Vec<(LogProbGrad, EntropyGrad)> = Vec::with_capacity(batch);
        for (b, dist) in decoded.dists.iter().enumerate() {
            let cache = dist.build_cache()?;
            let xb = x.column(b).into_owned();
            let (lp, lp_grad) = dist.log_prob_grad_with(&cache, &xb)?;
            nll -= lp;
            entropy += dist.entropy_with(&cache);
            pixel_variance += dist.marginal_variance().mean();
            kl += (0..l)
                .map(|i| 0.5 * (log_var[(i, b)].exp() + mean[(i, b)].powi(2) - 1.0 - log_var[(i, b)]))
                .sum::<f64>();
            per_sample.push((lp_grad, dist.entropy_grad_with(&cache)));
        }
        let inv_b = 1.0 / batch as f64;
        let terms = ElboTerms {
            nll: nll * inv_b,
            kl: kl * inv_b,
            entropy: entropy * inv_b,
            pixel_variance: pixel_variance * inv_b,
        };
        for (what, v) in [("nll", terms.nll), ("kl", terms.kl), ("entropy", terms.entropy)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(what));
            }
        }
        let w = weights(&terms);

        // Gradients with respect to the head outputs.
        let mut g_mu = DMatrix::zeros(s, batch);
        let mut g_factor = DMatrix::zeros(s * r, batch);
        let mut g_log_diag = DMatrix::zeros(s, batch);
        for (b, ((lp, ent), dist)) in per_sample.iter().zip(&decoded.dists).enumerate() {
            g_mu.set_column(b, &(&lp.mu * (-w.nll * inv_b)));
            for i in 0..s {
                for k in 0..r {
                    g_factor[(i * r + k, b)] =
                        inv_b * (-w.nll * lp.cov_factor[(i, k)] + w.entropy * ent.cov_factor[(i, k)]);
                }
                let g_d = inv_b * (-w.nll * lp.cov_diag[i] + w.entropy * ent.cov_diag[i]);
                g_log_diag[(i, b)] = g_d * dist.cov_diag()[i];
            }
        }

        let mut grads = vec![0.0; self.layout.len()];
        let features = &decoded.trunk.output;
        let mut g_features = self.mean_head.backward(&self.layout, &self.params, features, &g_mu, &mut grads);
        if !self.freeze.factor_head && r > 0 {
            g_features += self.factor_head.backward(&self.layout, &self.params, features, &g_factor, &mut grads);
        }
        if !self.freeze.diag_head && !self.config.epsilon_mode {
            g_features += self.diag_head.backward(&self.layout, &self.params, features, &g_log_diag, &mut grads);
        }
        let g_z = self.trunk.backward(&self.layout, &self.params, &decoded.trunk, g_features, &mut grads);

        let mut g_enc = DMatrix::zeros(2 * l, batch);
        for b in 0..batch {
            for i in 0..l {
                let gz = g_z[(i, b)];
                let lv = log_var[(i, b)];
                g_enc[(i, b)] = gz + w.kl * inv_b * mean[(i, b)];
                g_enc[(l + i, b)] = gz * eps[(i, b)] * 0.5 * std[(i, b)] + w.kl * inv_b * 0.5 * (lv.exp() - 1.0);
            }
        }
        self.encoder.backward(&self.layout, &self.params, &enc, g_enc, &mut grads);
        Ok((terms, grads))
    }

    /// Latent noise for a batch.
    pub fn latent_noise<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> DMatrix<f64> {
        standard_normal_matrix(rng, self.config.latent_dim, batch)
    }

    pub(crate) fn from_parts(config: VaeConfig, params: Vec<f64>, freeze: FreezeState) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        if params.len() != model.layout.len() {
            return Err(Error::dim("VAE parameters", model.layout.len(), params.len()));
        }
        model.params = params;
        model.set_freeze(freeze);
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistOnlyConfig {
    pub dim: usize,
    pub rank: usize,
    pub epsilon_mode: bool,
    pub epsilon: f64,
}

/// A low-rank Gaussian fitted directly: parameters are `μ`, `P` and `log d`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistOnlyModel {
    config: DistOnlyConfig,
    layout: ParamLayout,
    params: Vec<f64>,
    mu: usize,
    factor: usize,
    log_diag: usize,
}

impl DistOnlyModel {
    pub fn zeroed(config: DistOnlyConfig) -> Result<Self> {
        if config.dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if config.rank > config.dim {
            return Err(Error::InvalidArgument(format!(
                "rank {} exceeds dimension {}",
                config.rank, config.dim
            )));
        }
        let mut layout = ParamLayout::default();
        let mu = layout.push("mu", config.dim, 1);
        let factor = layout.push("cov_factor", config.dim, config.rank);
        let log_diag = layout.push("log_cov_diag", config.dim, 1);
        let params = vec![0.0; layout.len()];
        Ok(Self {
            config,
            layout,
            params,
            mu,
            factor,
            log_diag,
        })
    }

    /// Start from the data moments: `μ` = sample mean, `log d` = log of the
    /// per-pixel sample variance, `P` small and random.
    pub fn init_from_data<R: Rng + ?Sized>(config: DistOnlyConfig, data: &DMatrix<f64>, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        if data.nrows() != model.config.dim || data.ncols() == 0 {
            return Err(Error::dim("data rows", model.config.dim, data.nrows()));
        }
        let mean = data.column_mean();
        let var = data.column_variance().map(|v| v.max(1e-6));
        let scale = 0.1 * var.mean().sqrt();
        let (s, r) = (model.config.dim, model.config.rank);
        let p = standard_normal_matrix(rng, s, r) * scale;
        model.params[model.layout.block(model.mu).range()].copy_from_slice(mean.as_slice());
        model.params[model.layout.block(model.factor).range()].copy_from_slice(p.as_slice());
        let log_var = var.map(f64::ln);
        model.params[model.layout.block(model.log_diag).range()].copy_from_slice(log_var.as_slice());
        Ok(model)
    }

    /// Wrap an existing distribution. In ε-mode its diagonal is replaced by ε.
    pub fn from_distribution(dist: &LowRankGaussian, epsilon_mode: bool, epsilon: f64) -> Result<Self> {
        let mut model = Self::zeroed(DistOnlyConfig {
            dim: dist.dim(),
            rank: dist.rank(),
            epsilon_mode,
            epsilon,
        })?;
        let block = |id| model.layout.block(id).range();
        let (mu, factor, log_diag) = (block(model.mu), block(model.factor), block(model.log_diag));
        model.params[mu].copy_from_slice(dist.mu().as_slice());
        model.params[factor].copy_from_slice(dist.cov_factor().as_slice());
        for (dst, d) in model.params[log_diag].iter_mut().zip(dist.cov_diag().iter()) {
            *dst = d.ln();
        }
        Ok(model)
    }

    pub fn config(&self) -> &DistOnlyConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.layout.len()];
        if self.config.epsilon_mode {
            mask[self.layout.block(self.log_diag).range()].fill(false);
        }
        mask
    }

    pub fn dist(&self) -> Result<LowRankGaussian> {
        let mu = self.layout.view(&self.params, self.mu).column(0).into_owned();
        let factor = self.layout.view(&self.params, self.factor).into_owned();
        if self.config.epsilon_mode {
            LowRankGaussian::with_constant_diag(mu, factor, self.config.epsilon)
        } else {
            let diag = self.layout.view(&self.params, self.log_diag).column(0).map(f64::exp);
            LowRankGaussian::new(mu, factor, diag)
        }
    }

    /// Mean nll over the columns of `x` and the entropy (kl is zero), with
    /// the gradient of `weights(terms) · terms`.
    pub fn objective(
        &self,
        x: &DMatrix<f64>,
        weights: impl FnOnce(&ElboTerms) -> TermWeights,
    ) -> Result<(ElboTerms, Vec<f64>)> {
        if x.nrows() != self.config.dim {
            return Err(Error::dim("image width", self.config.dim, x.nrows()));
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let dist = self.dist()?;
        let cache = dist.build_cache()?;
        let inv_b = 1.0 / x.ncols() as f64;
        let mut nll = 0.0;
        let mut g_mu = DVector::zeros(dist.dim());
        let mut g_factor = DMatrix::zeros(dist.dim(), dist.rank());
        let mut g_diag = DVector::zeros(dist.dim());
        for col in x.column_iter() {
            let (lp, g) = dist.log_prob_grad_with(&cache, &col.into_owned())?;
            nll -= lp;
            g_mu -= g.mu;
            g_factor -= g.cov_factor;
            g_diag -= g.cov_diag;
        }
        let entropy = dist.entropy_with(&cache);
        let terms = ElboTerms {
            nll: nll * inv_b,
            kl: 0.0,
            entropy,
            pixel_variance: dist.marginal_variance().mean(),
        };
        if !terms.nll.is_finite() {
            return Err(Error::NonFinite("nll"));
        }
        let w = weights(&terms);
        let ent = dist.entropy_grad_with(&cache);
        let g_factor = g_factor * (w.nll * inv_b) + ent.cov_factor * w.entropy;
        let g_diag = g_diag * (w.nll * inv_b) + ent.cov_diag * w.entropy;

        let mut grads = vec![0.0; self.layout.len()];
        grads[self.layout.block(self.mu).range()].copy_from_slice((g_mu * (w.nll * inv_b)).as_slice());
        grads[self.layout.block(self.factor).range()].copy_from_slice(g_factor.as_slice());
        if !self.config.epsilon_mode {
            let g_log = g_diag.component_mul(dist.cov_diag());
            grads[self.layout.block(self.log_diag).range()].copy_from_slice(g_log.as_slice());
        }
        Ok((terms, grads))
    }

    pub(crate) fn from_parts(config: DistOnlyConfig, params: Vec<f64>) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        if params.len() != model.layout.len() {
            return Err(Error::dim("distribution parameters", model.layout.len(), params.len()));
        }
        model.params = params;
        Ok(model)
    }
}

/// Either model kind behind one interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Vae(VaeModel),
    DistOnly(DistOnlyModel),
}

impl Model {
    pub fn layout(&self) -> &ParamLayout {
        match self {
            Model::Vae(m) => m.layout(),
            Model::DistOnly(m) => m.layout(),
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Model::Vae(m) => m.params(),
            Model::DistOnly(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Model::Vae(m) => m.params_mut(),
            Model::DistOnly(m) => m.params_mut(),
        }
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        match self {
            Model::Vae(m) => m.trainable_mask(),
            Model::DistOnly(m) => m.trainable_mask(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Vae(m) => m.config().input_dim,
            Model::DistOnly(m) => m.config().dim,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Model::Vae(m) => m.config().rank,
            Model::DistOnly(m) => m.config().rank,
        }
    }

    /// Zero for the distribution-only model.
    pub fn latent_dim(&self) -> usize {
        match self {
            Model::Vae(m) => m.config().latent_dim,
            Model::DistOnly(_) => 0,
        }
    }

    /// The observation distribution for one generated image: a prior draw
    /// through the decoder, or the fitted distribution itself.
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LowRankGaussian> {
        match self {
            Model::Vae(m) => m.decode_prior(rng),
            Model::DistOnly(m) => m.dist(),
        }
    }

    /// Terms and gradient for one batch; `latent_noise` is ignored by the
    /// distribution-only model.
    pub fn objective(
        &self,
        x: &DMatrix<f64>,
        latent_noise: &DMatrix<f64>,
        weights: impl FnOnce(&ElboTerms) -> TermWeights,
    ) -> Result<(ElboTerms, Vec<f64>)> {
        match self {
            Model::Vae(m) => m.objective(x, latent_noise, weights),
            Model::DistOnly(m) => m.objective(x, weights),
        }
    }

    pub fn latent_noise<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> DMatrix<f64> {
        match self {
            Model::Vae(m) => m.latent_noise(rng, batch),
            Model::DistOnly(_) => DMatrix::zeros(0, batch),
        }
    }

    pub fn terms(&self, x: &DMatrix<f64>, latent_noise: &DMatrix<f64>) -> Result<ElboTerms> {
        self.objective(x, latent_noise, |_| TermWeights::NLL).map(|(t, _)| t)
    }
}
