//! Staged training: constrained warm-up, snapshot, informed-prior stage.
//!
//! Two-stage variants train for `c_epochs` with the local encoder and the
//! transition network frozen at their initial values and a standard global
//! prior. At the end of epoch `c_epochs` a copy of the global encoder is
//! captured; from then on every parameter trains (or, for `dsae_f`, all but
//! the global encoder) and early stopping watches the validation objective.

mod checkpoint;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT,
};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Network, ParamGroup, ParamVars};
use crate::objective::{compute_loss, LossBreakdown, LossSpec};
use crate::synthdata::Dataset;
use crate::tensor::{AdamConfig, AdamState, Rng, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single stage, plain ELBO, nothing frozen.
    Dsae,
    /// Constrained stage, then the global encoder is frozen.
    DsaeF,
    /// Two stages with the informed prior and no swap terms.
    TsDsaeNoregs,
    /// Two stages with the informed prior and the swap regularisers.
    TsDsae,
}

impl Variant {
    pub fn is_two_stage(self) -> bool {
        !matches!(self, Variant::Dsae)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dsae => "dsae",
            Variant::DsaeF => "dsae_f",
            Variant::TsDsaeNoregs => "ts_dsae_noregs",
            Variant::TsDsae => "ts_dsae",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub c_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            variant: Variant::TsDsae,
            c_epochs: 60,
            max_epochs: 600,
            patience: 60,
            batch_size: 32,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        if self.variant.is_two_stage() && self.c_epochs >= self.max_epochs {
            return Err(Error::config("c_epochs", "must be below max_epochs for two-stage variants"));
        }
        if self.variant.is_two_stage() && self.c_epochs == 0 {
            return Err(Error::config("c_epochs", "two-stage variants need a first stage"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("lr", "need lr > 0 and betas in [0, 1)"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    /// Stage of 1-based epoch `epoch`.
    pub fn stage_of(&self, epoch: usize) -> Stage {
        if self.variant.is_two_stage() && epoch <= self.c_epochs {
            Stage::Constrained
        } else {
            Stage::Informed
        }
    }
}

/// Training stage; the single-stage baseline runs entirely in the second.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Constrained,
    Informed,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Constrained => 1,
            Stage::Informed => 2,
        }
    }
}

/// Frozen copy of the global encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    /// Epoch after which it was captured.
    pub epoch: usize,
    pub tensors: std::collections::BTreeMap<String, Tensor>,
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub params: ModelParams,
    pub adam: AdamState,
    pub snapshot: Option<Snapshot>,
    pub best_val: Option<f64>,
    pub epochs_since_improvement: usize,
    pub stopped: bool,
    pub rng: Rng,
}

/// Mean loss components of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    /// The validation objective improved on the previous best.
    pub improved: bool,
}

pub const LOG_HEADER: &str =
    "epoch,stage,split,recon,kl_local,kl_global,swap_gv,swap_gz,swap_lv,swap_lz,total";

impl EpochLog {
    /// Two CSV rows (train, val) without trailing newline characters.
    pub fn csv_rows(&self) -> [String; 2] {
        let row = |split: &str, b: &LossBreakdown| {
            let values: Vec<String> = b.components().iter().map(|v| format!("{v:e}")).collect();
            format!("{},{},{split},{}", self.epoch, self.stage.number(), values.join(","))
        };
        [row("train", &self.train), row("val", &self.val)]
    }
}

/// Outcome of one early-stopping update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue { improved: bool },
    Stop,
}

/// Patience rule: stop once the best value has not strictly improved for
/// `patience` consecutive checks.
pub fn early_stop_check(
    best: &mut Option<f64>,
    since: &mut usize,
    patience: usize,
    value: f64,
) -> Result<StopDecision> {
    if !value.is_finite() {
        return Err(Error::Numerical(format!("validation objective is {value}")));
    }
    let improved = best.is_none_or(|b| value < b);
    if improved {
        *best = Some(value);
        *since = 0;
    } else {
        *since += 1;
    }
    Ok(if *since >= patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue { improved }
    })
}

/// Groups that receive no updates in `stage`.
pub fn frozen_groups(variant: Variant, stage: Stage) -> BTreeSet<ParamGroup> {
    match (variant, stage) {
        (Variant::Dsae, _) => BTreeSet::new(),
        (_, Stage::Constrained) => {
            [ParamGroup::LocalEncoder, ParamGroup::Transition, ParamGroup::DecoderContext].into()
        }
        (Variant::DsaeF, Stage::Informed) => [ParamGroup::GlobalEncoder].into(),
        (_, Stage::Informed) => BTreeSet::new(),
    }
}

/// Fresh model with Glorot initialisation drawn from `rng`.
pub fn init_model(config: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    ModelParams::init(config, rng)
}

impl TrainState {
    /// Initial state: parameters drawn from a stream derived from the seed,
    /// training noise from another.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_model(&config.model, &mut Rng::derive(config.seed, 0))?;
        Ok(TrainState {
            adam: AdamState::new(config.adam()),
            rng: Rng::derive(config.seed, 1),
            config,
            epoch: 0,
            params,
            snapshot: None,
            best_val: None,
            epochs_since_improvement: 0,
            stopped: false,
        })
    }

    pub fn stage(&self) -> Stage {
        self.config.stage_of(self.epoch.max(1))
    }

    pub fn finished(&self) -> bool {
        self.stopped || self.epoch >= self.config.max_epochs
    }

    /// Copies the live global encoder; allowed once.
    pub fn snapshot_global_encoder(&mut self) -> Result<&Snapshot> {
        if self.snapshot.is_some() {
            return Err(Error::contract("the global encoder snapshot was already taken"));
        }
        self.snapshot = Some(Snapshot {
            epoch: self.epoch,
            tensors: self.params.group(ParamGroup::GlobalEncoder),
        });
        Ok(self.snapshot.as_ref().expect("just set"))
    }

    /// Objective used in `stage`.
    pub fn loss_spec(&self, stage: Stage) -> Result<LossSpec> {
        Ok(match (self.config.variant, stage) {
            (Variant::Dsae, _) | (Variant::DsaeF, Stage::Informed) => LossSpec::standard_elbo(),
            (_, Stage::Constrained) => LossSpec::constrained(),
            (variant, Stage::Informed) => {
                let snap = self
                    .snapshot
                    .as_ref()
                    .ok_or_else(|| Error::contract("informed stage without a snapshot"))?;
                LossSpec::informed(snap.tensors.clone(), variant == Variant::TsDsae)
            }
        })
    }

    /// One pass over `data` in shuffled mini-batches with Adam updates on
    /// every group outside `frozen`.
    pub fn run_epoch(
        &mut self,
        data: &Dataset,
        spec: &LossSpec,
        frozen: &BTreeSet<ParamGroup>,
    ) -> Result<LossBreakdown> {
        if data.is_empty() {
            return Err(Error::contract("cannot train on an empty dataset"));
        }
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.rng.shuffle(&mut order);
        let trainable: Vec<String> = self
            .params
            .tensors
            .keys()
            .filter(|n| !frozen.contains(&ParamGroup::of(n)))
            .cloned()
            .collect();
        let mut mean = LossBreakdown::default();
        for (bi, idx) in order.chunks(self.config.batch_size).enumerate() {
            let batch = data.batch(idx);
            let mut tape = Tape::new();
            let vars = ParamVars::bind(&mut tape, &self.params.tensors, |n| {
                !frozen.contains(&ParamGroup::of(n))
            });
            let net = Network::new(&self.config.model, &vars);
            let x = tape.constant(batch.x);
            let out = compute_loss(&mut tape, &net, x, spec, &mut self.rng, None)?;
            if !out.breakdown.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    detail: format!("objective {:?}", out.breakdown),
                });
            }
            if !trainable.is_empty() {
                let grads = tape.backward(out.total)?;
                let grads = vars.collect_grads(&tape, &grads);
                self.adam
                    .step(&mut self.params.tensors, &grads, trainable.iter().map(String::as_str))?;
            }
            mean.accumulate(&out.breakdown, idx.len() as f64 / data.len() as f64);
        }
        if !self.params.tensors.values().all(Tensor::is_finite) {
            return Err(Error::Diverged {
                epoch,
                batch: order.len().div_ceil(self.config.batch_size) - 1,
                detail: "non-finite parameters after update".into(),
            });
        }
        Ok(mean)
    }

    /// Objective on `data` without updates; noise comes from a stream tied
    /// to the epoch so it does not disturb the training generator.
    pub fn evaluate(&self, data: &Dataset, spec: &LossSpec, epoch: usize) -> Result<LossBreakdown> {
        if data.is_empty() {
            return Err(Error::contract("cannot evaluate on an empty dataset"));
        }
        let mut rng = Rng::derive(self.config.seed, 1_000_000 + epoch as u64);
        let order: Vec<usize> = (0..data.len()).collect();
        let mut mean = LossBreakdown::default();
        for idx in order.chunks(self.config.batch_size) {
            let batch = data.batch(idx);
            let mut tape = Tape::new();
            let vars = ParamVars::constants(&mut tape, &self.params.tensors);
            let net = Network::new(&self.config.model, &vars);
            let x = tape.constant(batch.x);
            let out = compute_loss(&mut tape, &net, x, spec, &mut rng, None)?;
            mean.accumulate(&out.breakdown, idx.len() as f64 / data.len() as f64);
        }
        Ok(mean)
    }

    /// Runs the next epoch of the schedule, including the stage switch and
    /// the early-stopping update.
    pub fn step_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<EpochLog> {
        if self.finished() {
            return Err(Error::contract("training already finished"));
        }
        let epoch = self.epoch + 1;
        let stage = self.config.stage_of(epoch);
        let spec = self.loss_spec(stage)?;
        let frozen = frozen_groups(self.config.variant, stage);
        let train_loss = self.run_epoch(train, &spec, &frozen)?;
        self.epoch = epoch;
        let val_loss = self.evaluate(val, &spec, epoch)?;
        if !val_loss.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: 0,
                detail: format!("validation objective {}", val_loss.total),
            });
        }

        let mut improved = false;
        if stage == Stage::Informed {
            match early_stop_check(
                &mut self.best_val,
                &mut self.epochs_since_improvement,
                self.config.patience,
                val_loss.total,
            )? {
                StopDecision::Stop => self.stopped = true,
                StopDecision::Continue { improved: i } => improved = i,
            }
        }
        if self.config.variant.is_two_stage() && epoch == self.config.c_epochs {
            self.snapshot_global_encoder()?;
        }
        Ok(EpochLog {
            epoch,
            stage,
            train: train_loss,
            val: val_loss,
            improved,
        })
    }

    /// Trains to completion, calling `on_epoch` after every epoch with the
    /// updated state; an `Err` from the callback aborts.
    pub fn train(
        &mut self,
        train: &Dataset,
        val: &Dataset,
        mut on_epoch: impl FnMut(&TrainState, &EpochLog) -> Result<()>,
    ) -> Result<()> {
        while !self.finished() {
            let log = self.step_epoch(train, val)?;
            on_epoch(self, &log)?;
        }
        Ok(())
    }
}
