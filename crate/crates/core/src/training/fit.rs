use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, apply_variant, episode_loss, lr_at, model_dims, AblationVariant, Hyperparams,
    Model, OptimizerState, Wiring,
};
use crate::datasets::{episodes_per_epoch, sample_episode, Dataset};
use crate::error::{Error, Result};
use crate::params::ModelParams;

/// One line of the training log: episode means over an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Episodes completed so far, this epoch included.
    pub episode: u64,
    pub ce: f64,
    /// Consistency term before weighting.
    pub consistency: f64,
    /// Weight the consistency term entered the objective with; 0 when the
    /// variant disables it.
    pub consistency_weight: f64,
    pub total: f64,
    pub query_acc: f64,
    pub lr: f64,
}

/// Episode sampler for `epoch`. Each epoch has its own stream so that a
/// resumed run draws the same episodes as an unbroken one.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Resumable episodic training loop.
#[derive(Clone, Debug)]
pub struct Trainer<'a> {
    ds: &'a Dataset,
    hp: Hyperparams,
    variant: AblationVariant,
    wiring: Wiring,
    params: ModelParams<f32>,
    opt: OptimizerState<f32>,
    epoch: usize,
    episodes: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a Dataset, hp: &Hyperparams, variant: AblationVariant) -> Result<Self> {
        hp.validate()?;
        let seen = ds.split().seen.len();
        if hp.ways > seen {
            return Err(Error::Config(format!(
                "{}-way episodes need at least {} seen classes, dataset has {seen}",
                hp.ways, hp.ways
            )));
        }
        let wiring = apply_variant(variant, hp);
        let params = ModelParams::init(&model_dims(ds, hp, &wiring), hp.seed)?;
        let opt = OptimizerState::new(&params, hp.decay_biases);
        Ok(Trainer {
            ds,
            hp: hp.clone(),
            variant,
            wiring,
            params,
            opt,
            epoch: 0,
            episodes: 0,
        })
    }

    /// Continues from saved state; `epoch` is the next epoch to run.
    pub fn resume(
        ds: &'a Dataset,
        hp: &Hyperparams,
        variant: AblationVariant,
        params: ModelParams<f32>,
        opt: OptimizerState<f32>,
        epoch: usize,
    ) -> Result<Self> {
        let mut t = Trainer::new(ds, hp, variant)?;
        if params.dims() != t.params.dims() {
            return Err(Error::Manifest(format!(
                "checkpoint dims {:?} do not match the configured model {:?}",
                params.dims(),
                t.params.dims()
            )));
        }
        if opt.m.len() != t.opt.m.len() {
            return Err(Error::Manifest("optimizer state does not match parameters".into()));
        }
        t.params = params;
        t.opt = opt;
        t.epoch = epoch;
        t.episodes = epoch as u64 * t.episodes_per_epoch() as u64;
        Ok(t)
    }

    pub fn episodes_per_epoch(&self) -> usize {
        episodes_per_epoch(self.ds.split().train.len(), self.hp.ways, self.hp.shots)
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn optimizer(&self) -> &OptimizerState<f32> {
        &self.opt
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn variant(&self) -> AblationVariant {
        self.variant
    }

    pub fn wiring(&self) -> &Wiring {
        &self.wiring
    }

    /// Index of the next epoch to run.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.hp.epochs
    }

    pub fn into_model(self) -> Model {
        Model {
            params: self.params,
            hp: self.hp,
            variant: self.variant,
        }
    }

    /// Copy of the current parameters with their settings.
    pub fn model(&self) -> Model {
        Model {
            params: self.params.clone(),
            hp: self.hp.clone(),
            variant: self.variant,
        }
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.epoch;
        let lr = lr_at(epoch, &self.hp);
        let mut rng = epoch_rng(self.hp.seed, epoch);
        let n = self.episodes_per_epoch();
        let (mut ce, mut cons, mut total, mut acc) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let ep = sample_episode(
                self.ds,
                self.hp.ways,
                self.hp.shots,
                self.hp.query_per_class,
                &mut rng,
            )?;
            let res = episode_loss(&mut self.params, &self.hp, &self.wiring, &ep, self.ds)
                .map_err(|e| match e {
                    Error::Numeric(m) => {
                        let last = match epoch {
                            0 => "none".to_string(),
                            e => (e - 1).to_string(),
                        };
                        Error::Numeric(format!(
                            "training diverged at epoch {epoch}, episode {i} (last finite epoch: {last}): {m}"
                        ))
                    }
                    other => other,
                })?;
            adam_step(&mut self.opt, &mut self.params, lr, self.hp.weight_decay);
            ce += res.ce_loss;
            cons += res.consistency_loss;
            total += res.total;
            acc += res.query_accuracy;
        }
        self.episodes += n as u64;
        self.epoch += 1;
        let k = n as f64;
        Ok(EpochLog {
            epoch,
            episode: self.episodes,
            ce: ce / k,
            consistency: cons / k,
            consistency_weight: self.wiring.consistency_weight,
            total: total / k,
            query_acc: acc / k,
            lr,
        })
    }
}

/// Trained parameters and the per-epoch log.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Runs every epoch. `callback` sees each epoch's log record and the
/// parameters after that epoch.
pub fn fit(
    ds: &Dataset,
    hp: &Hyperparams,
    variant: AblationVariant,
    callback: &mut dyn FnMut(&EpochLog, &Trainer<'_>) -> Result<()>,
) -> Result<FitOutcome> {
    let mut trainer = Trainer::new(ds, hp, variant)?;
    let mut log = Vec::with_capacity(hp.epochs);
    while !trainer.is_done() {
        let rec = trainer.run_epoch()?;
        callback(&rec, &trainer)?;
        log.push(rec);
    }
    Ok(FitOutcome {
        model: trainer.into_model(),
        log,
    })
}
