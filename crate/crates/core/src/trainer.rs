//! Epoch loop: seeded shuffling, the variance-head freeze schedule, the
//! constrained objective and per-epoch logging, for both model kinds.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::constrained::{
    lagrangian_value, update_multipliers, AdamConfig, LagrangianState, LogRow, OptimizerKind, OptimizerState,
};
use crate::data::{Dataset, ImageShape};
use crate::error::{Error, Result};
use crate::lowrank::LN_2PI;
use crate::models::{
    DistOnlyConfig, DistOnlyModel, ElboTerms, FreezeState, Model, TermWeights, VaeConfig, VaeModel, DEFAULT_EPSILON,
};
use crate::random::{seeded, RngState, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vae,
    DistOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub latent_dim: usize,
    pub rank: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of epochs trained with the variance heads frozen.
    pub freeze_fraction: f64,
    /// Fix the diagonal to `epsilon` instead of learning it.
    pub epsilon_mode: bool,
    pub epsilon: f64,
    /// When false the entropy multiplier stays at zero.
    pub entropy_constraint: bool,
    pub optimizer: OptimizerChoice,
    pub lr: f64,
    pub multiplier_lr: f64,
    pub damping: f64,
    pub xi_kl: f64,
    /// Entropy slack; `None` uses [`default_entropy_slack`].
    pub xi_h: Option<f64>,
    pub beta_init: f64,
    pub lambda_init: f64,
    /// Keep a checkpoint every this many epochs; zero keeps only the last.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    /// Desk-scale shapes with the library's default step sizes and slack.
    fn default() -> Self {
        Self {
            model: ModelKind::Vae,
            latent_dim: 16,
            rank: 8,
            hidden: vec![256, 128],
            epochs: 20,
            batch_size: 64,
            seed: 0,
            freeze_fraction: 0.1,
            epsilon_mode: true,
            epsilon: DEFAULT_EPSILON,
            entropy_constraint: true,
            optimizer: OptimizerChoice::Adam,
            lr: AdamConfig::default().lr,
            multiplier_lr: 1e-2,
            damping: 1.0,
            xi_kl: 15.0,
            xi_h: None,
            beta_init: 1.0,
            lambda_init: 0.0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.freeze_fraction) {
            return bad("freeze_fraction must lie in [0, 1]");
        }
        if self.model == ModelKind::Vae && self.latent_dim == 0 {
            return bad("latent_dim must be positive");
        }
        if !(self.lr > 0.0) || !(self.multiplier_lr > 0.0) || !(self.damping >= 0.0) {
            return bad("learning rates must be positive and damping non-negative");
        }
        if self.epsilon_mode && !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }

    /// Entropy slack actually used for images of `dim` pixels.
    pub fn entropy_slack(&self, dim: usize) -> f64 {
        self.xi_h.unwrap_or_else(|| default_entropy_slack(dim))
    }

    pub fn freeze_epochs(&self) -> usize {
        (self.freeze_fraction * self.epochs as f64).round() as usize
    }

    fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Adam => OptimizerKind::Adam(AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            }),
            OptimizerChoice::Sgd => OptimizerKind::Sgd { lr: self.lr },
        }
    }

    /// SHA-256 of the JSON encoding.
    pub fn hash(&self) -> String {
        use sha2::Digest;
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(sha2::Sha256::digest(&json))
    }
}

/// Fan-in gain for the factor head when it first starts training.
pub const FACTOR_HEAD_GAIN: f64 = 0.01;

/// Entropy of an isotropic Gaussian over `dim` pixels with variance 10⁻³.
pub fn default_entropy_slack(dim: usize) -> f64 {
    let s = dim as f64;
    0.5 * s * (1.0 + LN_2PI) + 0.5 * s * (1e-3f64).ln()
}

/// Trainer state; everything needed to continue bit-for-bit lives here.
pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a Dataset,
    model: Model,
    optimizer: OptimizerState,
    lagrangian: LagrangianState,
    rng: SeededRng,
    epoch: usize,
    step: u64,
    log: Vec<LogRow>,
    last_good: Option<Checkpoint>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let dim = dataset.shape.size();
        let mut rng = seeded(config.seed);
        let model = match config.model {
            ModelKind::Vae => {
                let vae_config = vae_config(&config, dim);
                let mean = dataset.mean();
                let var = dataset.pixels.column_variance().mean().max(1e-4);
                Model::Vae(VaeModel::new(vae_config, &mut rng, Some(&mean), var.ln())?)
            }
            ModelKind::DistOnly => {
                let dist_config = dist_config(&config, dim);
                Model::DistOnly(DistOnlyModel::init_from_data(dist_config, &dataset.pixels, &mut rng)?)
            }
        };
        let optimizer = OptimizerState::new(config.optimizer_kind(), model.layout().len());
        let lagrangian = LagrangianState {
            beta: config.beta_init.max(0.0),
            lambda_h: if config.entropy_constraint { config.lambda_init.max(0.0) } else { 0.0 },
            xi_kl: config.xi_kl,
            xi_h: config.entropy_slack(dim),
            damping: config.damping,
            multiplier_lr: config.multiplier_lr,
        };
        Ok(Self {
            config,
            dataset,
            model,
            optimizer,
            lagrangian,
            rng,
            epoch: 0,
            step: 0,
            log: Vec::new(),
            last_good: None,
        })
    }

    pub fn from_checkpoint(checkpoint: Checkpoint, dataset: &'a Dataset) -> Result<Self> {
        let header = checkpoint.header;
        if dataset.shape != header.image_shape {
            return Err(Error::InvalidArgument(format!(
                "dataset shape {:?} does not match checkpoint shape {:?}",
                dataset.shape, header.image_shape
            )));
        }
        Ok(Self {
            config: header.config,
            dataset,
            model: checkpoint.model,
            optimizer: checkpoint.optimizer,
            lagrangian: header.lagrangian,
            rng: header.rng.restore(),
            epoch: header.epoch,
            step: header.step,
            log: Vec::new(),
            last_good: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn lagrangian(&self) -> &LagrangianState {
        &self.lagrangian
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    /// Change the total epoch count, e.g. to continue a finished run. The
    /// freeze boundary follows the new total.
    pub fn set_epochs(&mut self, epochs: usize) -> Result<()> {
        let config = TrainConfig { epochs, ..self.config.clone() };
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Checkpoint from the last completed epoch before a divergence.
    pub fn last_good(&self) -> Option<&Checkpoint> {
        self.last_good.as_ref()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len().div_ceil(self.config.batch_size)
    }

    /// First optimizer step at which the variance heads train.
    pub fn unfreeze_step(&self) -> u64 {
        (self.config.freeze_epochs() * self.batches_per_epoch()) as u64
    }

    fn apply_freeze_schedule(&mut self) {
        let frozen = self.step < self.unfreeze_step();
        if let Model::Vae(vae) = &mut self.model {
            vae.set_freeze(FreezeState {
                factor_head: frozen,
                diag_head: frozen,
            });
            if !frozen && vae.seed_factor_head(&mut self.rng, FACTOR_HEAD_GAIN) {
                tracing::debug!(step = self.step, "factor head seeded");
            }
        }
    }

    fn effective_lagrangian(&self) -> LagrangianState {
        LagrangianState {
            lambda_h: if self.config.entropy_constraint { self.lagrangian.lambda_h } else { 0.0 },
            ..self.lagrangian
        }
    }

    fn term_weights(&self, terms: &ElboTerms) -> TermWeights {
        let state = self.effective_lagrangian();
        let (kl, entropy) = state.term_weights(terms.kl, terms.entropy);
        TermWeights {
            nll: 1.0,
            kl,
            entropy: if self.config.entropy_constraint { entropy } else { 0.0 },
        }
    }

    fn breakdown(&self, terms: &ElboTerms) -> Result<f64> {
        let mut state = self.effective_lagrangian();
        if !self.config.entropy_constraint {
            // Puts the entropy exactly on its slack so it contributes nothing.
            state.xi_h = terms.entropy;
        }
        Ok(lagrangian_value(terms.nll, terms.kl, terms.entropy, &state)?.lagrangian)
    }

    /// One parameter update on the given dataset columns, then one multiplier update.
    pub fn train_step(&mut self, indices: &[usize]) -> Result<(ElboTerms, f64)> {
        self.apply_freeze_schedule();
        let x = self.dataset.batch(indices);
        let eps = self.model.latent_noise(&mut self.rng, indices.len());
        let step = self.step;
        let weights_of = |t: &ElboTerms| self.term_weights(t);
        let (terms, grads) = self.model.objective(&x, &eps, weights_of).map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged { step, what },
            // an underflowed variance after an earlier step
            Error::InvalidArgument(_) if step > 0 => Error::Diverged { step, what: "distribution" },
            other => other,
        })?;
        let lagrangian = self.breakdown(&terms)?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, what: "gradient" });
        }
        let mask = self.model.trainable_mask();
        self.optimizer.step(self.model.params_mut(), &grads, Some(&mask))?;
        let mut next = update_multipliers(&self.lagrangian, terms.kl, terms.entropy);
        if !self.config.entropy_constraint {
            next.lambda_h = 0.0;
        }
        self.lagrangian = next;
        self.step += 1;
        Ok((terms, lagrangian))
    }

    pub fn run_epoch(&mut self) -> Result<LogRow> {
        let snapshot = self.checkpoint();
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let (terms, lagrangian) = match self.train_step(chunk) {
                Ok(v) => v,
                Err(e) => {
                    self.last_good = Some(snapshot);
                    return Err(e);
                }
            };
            sums[0] += terms.nll;
            sums[1] += terms.kl;
            sums[2] += terms.entropy;
            sums[3] += lagrangian;
            batches += 1;
        }
        let n = batches as f64;
        let row = LogRow {
            step: self.step,
            nll: sums[0] / n,
            kl: sums[1] / n,
            entropy: sums[2] / n,
            beta: self.lagrangian.beta,
            lambda_h: self.lagrangian.lambda_h,
            lagrangian: sums[3] / n,
        };
        self.epoch += 1;
        self.log.push(row);
        tracing::info!(
            epoch = self.epoch,
            nll = row.nll,
            kl = row.kl,
            entropy = row.entropy,
            beta = row.beta,
            lambda_h = row.lambda_h,
            "epoch finished"
        );
        Ok(row)
    }

    /// Train to the configured epoch count, calling `on_checkpoint` at every
    /// checkpoint interval.
    pub fn run_with(&mut self, mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch()?;
            let interval = self.config.checkpoint_interval;
            if interval > 0 && self.epoch.is_multiple_of(interval) && !self.is_finished() {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_| Ok(()))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut model = self.model.clone();
        if let Model::Vae(vae) = &mut model {
            let frozen = self.step < self.unfreeze_step();
            vae.set_freeze(FreezeState {
                factor_head: frozen,
                diag_head: frozen,
            });
        }
        Checkpoint {
            header: CheckpointHeader::new(
                self.config.clone(),
                self.dataset.shape,
                self.epoch,
                self.step,
                RngState::capture(self.config.seed, &self.rng),
                self.lagrangian,
                &self.optimizer,
            ),
            model,
            optimizer: self.optimizer.clone(),
        }
    }
}

pub(crate) fn vae_config(config: &TrainConfig, dim: usize) -> VaeConfig {
    VaeConfig {
        input_dim: dim,
        latent_dim: config.latent_dim,
        rank: config.rank,
        hidden: config.hidden.clone(),
        epsilon_mode: config.epsilon_mode,
        epsilon: config.epsilon,
    }
}

pub(crate) fn dist_config(config: &TrainConfig, dim: usize) -> DistOnlyConfig {
    DistOnlyConfig {
        dim,
        rank: config.rank,
        epsilon_mode: config.epsilon_mode,
        epsilon: config.epsilon,
    }
}

/// Outcome of a full training run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

pub fn train(config: TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, dataset)?;
    trainer.run()?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        log: trainer.log().to_vec(),
    })
}

/// Fit a free low-rank Gaussian to the columns of `dataset`.
pub fn fit_dist_only(config: TrainConfig, dataset: &Dataset) -> Result<DistOnlyModel> {
    let config = TrainConfig {
        model: ModelKind::DistOnly,
        ..config
    };
    match train(config, dataset)?.checkpoint.model {
        Model::DistOnly(m) => Ok(m),
        Model::Vae(_) => unreachable!("distribution-only run produced a VAE"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub count: usize,
    pub mean_log_likelihood: f64,
    pub mean_nll: f64,
    pub mean_kl: f64,
    pub mean_entropy: f64,
    /// Average over pixels and images of `dᵢ + ‖Pᵢ‖²`.
    pub mean_pixel_variance: f64,
}

/// Seeded single-sample evaluation over the whole dataset in order.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<EvalMetrics> {
    let header = &checkpoint.header;
    if dataset.shape != header.image_shape {
        return Err(Error::Dimension {
            what: "dataset image size",
            expected: header.image_shape.size(),
            got: dataset.shape.size(),
        });
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let mut rng = seeded(header.config.seed ^ 0x005E_ED0F_E7A1);
    let batch = header.config.batch_size.max(1);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut totals = [0.0; 4];
    for chunk in indices.chunks(batch) {
        let x = dataset.batch(chunk);
        let eps = checkpoint.model.latent_noise(&mut rng, chunk.len());
        let terms = checkpoint.model.terms(&x, &eps)?;
        let w = chunk.len() as f64;
        totals[0] += terms.nll * w;
        totals[1] += terms.kl * w;
        totals[2] += terms.entropy * w;
        totals[3] += terms.pixel_variance * w;
    }
    let n = dataset.len() as f64;
    Ok(EvalMetrics {
        count: dataset.len(),
        mean_log_likelihood: -totals[0] / n,
        mean_nll: totals[0] / n,
        mean_kl: totals[1] / n,
        mean_entropy: totals[2] / n,
        mean_pixel_variance: totals[3] / n,
    })
}

/// Image shape and flat pixel count of a checkpoint's data.
pub fn checkpoint_shape(checkpoint: &Checkpoint) -> ImageShape {
    checkpoint.header.image_shape
}

/// Mean marginal variance of a single distribution, for reporting.
pub fn mean_marginal_variance(variances: &DVector<f64>) -> f64 {
    variances.mean()
}
