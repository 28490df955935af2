use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointHeader, RngState, TrainerState};
use super::optim::{clip_grad_norm, lr_at_step, Adam, AdamConfig};
use crate::data::{make_batch, BatchSide, BatchSource, DialogueExample, EncodedExample, UnpairedExample, Vocabulary};
use crate::error::{Error, Result};
use crate::inference::GenerationPolicy;
use crate::latent::SampleMode;
use crate::metrics::perplexity;
use crate::model::DualEmp;
pub use crate::objectives::Ablation;
use crate::objectives::{kl_anneal_weight, total_loss, Baselines, LossBreakdown, LossSettings, LossWeights, PseudoMode};

/// Largest K for which `auto` sums over every latent category.
pub const AUTO_ENUMERATE_MAX_K: usize = 8;

/// How the latent expectation is estimated during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentModeChoice {
    /// Exact enumeration for K ≤ 8, straight-through Gumbel above.
    Auto,
    Enumerate,
    #[default]
    StGumbel,
}

impl LatentModeChoice {
    pub fn resolve(self, k: usize, temperature: f64) -> SampleMode {
        match self {
            LatentModeChoice::Enumerate => SampleMode::Enumerate,
            LatentModeChoice::Auto if k <= AUTO_ENUMERATE_MAX_K => SampleMode::Enumerate,
            LatentModeChoice::Auto | LatentModeChoice::StGumbel => SampleMode::StGumbel { temperature },
        }
    }
}

impl FromStr for LatentModeChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(LatentModeChoice::Auto),
            "enumerate" => Ok(LatentModeChoice::Enumerate),
            "st-gumbel" => Ok(LatentModeChoice::StGumbel),
            other => Err(Error::Config(format!(
                "unknown latent mode {other:?} (expected auto, enumerate or st-gumbel)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Learning rate at step 1.
    pub base_lr: f64,
    pub warmup_steps: u64,
    /// KL annealing length as a fraction of all planned steps.
    pub kl_warmup_fraction: f64,
    pub clip_norm: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
    pub latent_mode: LatentModeChoice,
    pub gumbel_temperature: f64,
    /// Per-epoch multiplier on the Gumbel temperature.
    pub gumbel_decay: f64,
    pub gumbel_floor: f64,
    pub pseudo_max_len: usize,
    pub baseline_momentum: f64,
    pub ablation: Ablation,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            epochs: 30,
            patience: 3,
            batch_size: 16,
            base_lr: 1e-4,
            warmup_steps: 40,
            kl_warmup_fraction: 0.2,
            clip_norm: Some(1.0),
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            seed: 0,
            latent_mode: LatentModeChoice::StGumbel,
            gumbel_temperature: 1.0,
            gumbel_decay: 0.9,
            gumbel_floor: 0.5,
            pseudo_max_len: 20,
            baseline_momentum: 0.95,
            ablation: Ablation::Dual,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.patience == 0 {
            return fail("patience must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr must be finite and non-negative");
        }
        if self.warmup_steps == 0 {
            return fail("warmup_steps must be at least 1");
        }
        if !(self.kl_warmup_fraction > 0.0 && self.kl_warmup_fraction <= 1.0) {
            return fail("kl_warmup_fraction must lie in (0, 1]");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return fail("clip_norm must be positive");
        }
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.gumbel_temperature > 0.0 && self.gumbel_floor > 0.0 && self.gumbel_decay > 0.0 && self.gumbel_decay <= 1.0) {
            return fail("Gumbel temperature and floor must be positive and decay in (0, 1]");
        }
        if self.pseudo_max_len == 0 {
            return fail("pseudo_max_len must be at least 1");
        }
        if !(0.0..1.0).contains(&self.baseline_momentum) {
            return fail("baseline_momentum must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }
}

/// Encoded training streams.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainData {
    pub paired: Vec<EncodedExample>,
    /// Scored for early stopping; the paired set stands in when empty.
    pub valid: Vec<EncodedExample>,
    pub unpaired_c: Vec<EncodedExample>,
    pub unpaired_y: Vec<EncodedExample>,
}

impl TrainData {
    pub fn encode(
        vocab: &Vocabulary,
        max_positions: usize,
        paired: &[DialogueExample],
        valid: &[DialogueExample],
        unpaired_c: &[UnpairedExample],
        unpaired_y: &[UnpairedExample],
    ) -> Result<Self> {
        let pairs = |xs: &[DialogueExample]| -> Result<Vec<EncodedExample>> {
            let src: Vec<BatchSource> = xs.iter().map(BatchSource::Paired).collect();
            if src.is_empty() {
                return Ok(Vec::new());
            }
            Ok(make_batch(&src, vocab, BatchSide::Paired, max_positions)?.examples())
        };
        let lone = |xs: &[UnpairedExample], side| -> Result<Vec<EncodedExample>> {
            let src: Vec<BatchSource> = xs.iter().map(BatchSource::Unpaired).collect();
            if src.is_empty() {
                return Ok(Vec::new());
            }
            Ok(make_batch(&src, vocab, side, max_positions)?.examples())
        };
        Ok(TrainData {
            paired: pairs(paired)?,
            valid: pairs(valid)?,
            unpaired_c: lone(unpaired_c, BatchSide::ContextOnly)?,
            unpaired_y: lone(unpaired_y, BatchSide::ResponseOnly)?,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: f64,
    pub valid_ppl: f64,
    pub improved: bool,
    pub gumbel_temperature: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

pub struct Trainer {
    pub plan: TrainPlan,
    pub model: DualEmp,
    pub vocab: Vocabulary,
    pub labels: Vec<String>,
    adam: Adam,
    rng: ChaCha8Rng,
    state: TrainerState,
    best: Option<Checkpoint>,
}

impl Trainer {
    pub fn new(plan: TrainPlan, model: DualEmp, vocab: Vocabulary, labels: Vec<String>) -> Result<Self> {
        plan.validate()?;
        if labels.len() != model.config.n_labels {
            return Err(Error::Config(format!(
                "{} label names for a model with {} labels",
                labels.len(),
                model.config.n_labels
            )));
        }
        let rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let adam = Adam::new(&model.store, AdamConfig::default());
        let state = TrainerState {
            epoch: 0,
            step: 0,
            rng: RngState::capture(&rng),
            baselines: Baselines::new(plan.baseline_momentum),
            gumbel_temperature: plan.gumbel_temperature,
            best_valid_ppl: None,
            best_epoch: None,
            epochs_without_improvement: 0,
            adam: adam.config.clone(),
            adam_step: 0,
        };
        Ok(Trainer {
            plan,
            model,
            vocab,
            labels,
            adam,
            rng,
            state,
            best: None,
        })
    }

    /// Continues from a checkpoint written at an epoch boundary. `best` is
    /// the best checkpoint so far, if it was kept separately.
    pub fn resume(last: &Checkpoint, best: Option<Checkpoint>) -> Result<Self> {
        let h = &last.header;
        h.plan.validate()?;
        let model = last.model()?;
        let adam = last
            .adam(&model.store)?
            .ok_or_else(|| Error::Format("checkpoint carries no optimizer state to resume from".into()))?;
        Ok(Trainer {
            plan: h.plan.clone(),
            vocab: h.vocab.clone(),
            labels: h.labels.clone(),
            rng: h.state.rng.restore(),
            state: h.state.clone(),
            model,
            adam,
            best,
        })
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn best(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    /// Current parameters, optimizer moments and loop state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = self.state.clone();
        state.rng = RngState::capture(&self.rng);
        state.adam_step = self.adam.step;
        let header = CheckpointHeader {
            model: self.model.config.clone(),
            plan: self.plan.clone(),
            vocab: self.vocab.clone(),
            labels: self.labels.clone(),
            state,
        };
        Checkpoint::capture(header, &self.model, Some(&self.adam))
    }

    pub fn steps_per_epoch(&self, data: &TrainData) -> u64 {
        data.paired.len().div_ceil(self.plan.batch_size) as u64
    }

    fn kl_warmup(&self, data: &TrainData) -> u64 {
        let total = self.steps_per_epoch(data) * self.plan.epochs as u64;
        ((total as f64 * self.plan.kl_warmup_fraction).round() as u64).max(1)
    }

    /// Whether the plan's epochs are used up or early stopping fired.
    pub fn finished(&self) -> bool {
        self.state.epoch >= self.plan.epochs || self.state.epochs_without_improvement >= self.plan.patience
    }

    fn draw(&mut self, pool: &[EncodedExample]) -> Vec<EncodedExample> {
        if pool.is_empty() || self.plan.ablation != Ablation::Dual {
            return Vec::new();
        }
        (0..self.plan.batch_size)
            .map(|_| pool[self.rng.gen_range(0..pool.len())].clone())
            .collect()
    }

    fn step(&mut self, data: &TrainData, paired: &[EncodedExample]) -> Result<StepRecord> {
        let unpaired_c = self.draw(&data.unpaired_c);
        let unpaired_y = self.draw(&data.unpaired_y);
        let settings = LossSettings {
            ablation: self.plan.ablation,
            weights: self.plan.weights(),
            lambda: kl_anneal_weight(self.state.step, self.kl_warmup(data))?,
            mode: self
                .plan
                .latent_mode
                .resolve(self.model.config.k_latent, self.state.gumbel_temperature),
            pseudo: PseudoMode::Sample(GenerationPolicy::pseudo(self.plan.pseudo_max_len)),
            dropout: self.model.config.dropout,
        };
        self.model.store.zero_grad();
        let loss = total_loss(
            &mut self.model,
            paired,
            &unpaired_c,
            &unpaired_y,
            &settings,
            &mut self.state.baselines,
            &mut self.rng,
            true,
        );
        let loss = match loss {
            Err(Error::Tensor(demp_tensor::TensorError::NonFinite(op))) => {
                log::error!("non-finite values in {op}");
                return Err(Error::Diverged {
                    step: self.state.step + 1,
                    loss: f64::NAN,
                });
            }
            other => other?,
        };
        let diverged = || Error::Diverged {
            step: self.state.step + 1,
            loss: loss.total,
        };
        if !loss.total.is_finite() {
            return Err(diverged());
        }
        let grad_norm = match self.plan.clip_norm {
            Some(c) => clip_grad_norm(&mut self.model.store, c),
            None => self.model.store.grad_norm(),
        };
        let lr = lr_at_step(self.state.step + 1, self.plan.warmup_steps, self.plan.base_lr)?;
        match self.adam.step(&mut self.model.store, lr) {
            Err(Error::NonFiniteGrad(name)) => {
                log::error!("non-finite gradient in {name}");
                return Err(diverged());
            }
            other => other?,
        }
        self.state.step += 1;
        Ok(StepRecord {
            epoch: self.state.epoch + 1,
            step: self.state.step,
            lr,
            grad_norm,
            loss,
        })
    }

    /// One pass over the paired corpus followed by validation.
    pub fn run_epoch(&mut self, data: &TrainData, on_step: &mut dyn FnMut(&StepRecord) -> Result<()>) -> Result<EpochRecord> {
        if data.paired.is_empty() {
            return Err(Error::invalid("training needs a nonempty paired corpus"));
        }
        let mut order: Vec<usize> = (0..data.paired.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.plan.batch_size) {
            let batch: Vec<EncodedExample> = chunk.iter().map(|&i| data.paired[i].clone()).collect();
            let rec = self.step(data, &batch)?;
            total += rec.loss.total;
            steps += 1;
            on_step(&rec)?;
        }
        self.state.epoch += 1;

        let valid = if data.valid.is_empty() { &data.paired } else { &data.valid };
        let valid_ppl = perplexity(&self.model, valid)?;
        let improved = self.state.best_valid_ppl.is_none_or(|best| valid_ppl < best);
        if improved {
            self.state.best_valid_ppl = Some(valid_ppl);
            self.state.best_epoch = Some(self.state.epoch);
            self.state.epochs_without_improvement = 0;
        } else {
            self.state.epochs_without_improvement += 1;
        }
        let temperature = self.state.gumbel_temperature;
        self.state.gumbel_temperature = (temperature * self.plan.gumbel_decay).max(self.plan.gumbel_floor);
        if improved {
            self.best = Some(self.checkpoint());
        }
        Ok(EpochRecord {
            epoch: self.state.epoch,
            steps,
            mean_loss: total / steps as f64,
            valid_ppl,
            improved,
            gumbel_temperature: temperature,
        })
    }

    /// Runs epochs until the plan is exhausted or validation perplexity
    /// stops improving for `patience` epochs.
    pub fn fit(
        &mut self,
        data: &TrainData,
        on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
        on_epoch: &mut dyn FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<TrainOutcome> {
        let mut epochs = Vec::new();
        while !self.finished() {
            let rec = self.run_epoch(data, on_step)?;
            log::info!(
                "epoch {} loss {:.4} valid ppl {:.4}{}",
                rec.epoch,
                rec.mean_loss,
                rec.valid_ppl,
                if rec.improved { " *" } else { "" }
            );
            on_epoch(self, &rec)?;
            epochs.push(rec);
        }
        let best = self.best.clone().unwrap_or_else(|| self.checkpoint());
        Ok(TrainOutcome {
            best,
            epochs,
            stopped_early: self.state.epoch < self.plan.epochs,
        })
    }
}

/// Trains a fresh model on `data` and returns the best checkpoint.
pub fn run_training(plan: TrainPlan, data: &TrainData, model: DualEmp, vocab: Vocabulary, labels: Vec<String>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(plan, model, vocab, labels)?;
    trainer.fit(data, &mut |_| Ok(()), &mut |_, _| Ok(()))
}
