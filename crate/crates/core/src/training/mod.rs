//! Episodic training: settings, model variants, the episode objective,
//! the optimiser and the epoch loop.

mod adam;
mod fit;
mod hyperparams;
mod objective;
mod variant;

pub use adam::{adam_step, OptimizerState};
pub use fit::{epoch_rng, fit, EpochLog, FitOutcome, Trainer};
pub use hyperparams::{lr_at, parse_threshold, set_field, Hyperparams, Reduction};
pub use objective::{
    episode_forward, episode_loss, model_dims, propagate, EpisodeForward, EpisodeInputs,
    EpisodeResult, GraphPair, Propagated,
};
pub(crate) use objective::head_var;
pub use variant::{apply_variant, AblationVariant, ClassifierInput, HeadChoice, Wiring};

use crate::params::ModelParams;

/// Trained parameters with the settings needed to run them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: ModelParams<f32>,
    pub hp: Hyperparams,
    pub variant: AblationVariant,
}

impl Model {
    pub fn wiring(&self) -> Wiring {
        apply_variant(self.variant, &self.hp)
    }
}
