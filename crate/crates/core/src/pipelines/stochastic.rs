use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{ConfidenceModel, NormalizedCommand};
use crate::sim::TrackModel;

use super::classic::{Classic, CLASSIC_STD};
use super::{Pipeline, PipelineConfig, PipelineError, TickInput, TickOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StochasticParams {
    /// Innovation std of the perturbation process, per tick.
    pub noise_std: f64,
    /// AR(1) coefficient smoothing the perturbation.
    pub smoothing: f64,
    /// Per-tick probability of entering a low-confidence episode.
    pub episode_prob: f64,
    pub episode_ticks: u32,
}

impl Default for StochasticParams {
    fn default() -> Self {
        StochasticParams {
            noise_std: 0.01,
            smoothing: 0.9,
            episode_prob: 0.0,
            episode_ticks: 25,
        }
    }
}

impl StochasticParams {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.noise_std >= 0.0 && (0.0..1.0).contains(&self.smoothing) && (0.0..=1.0).contains(&self.episode_prob)) {
            return Err(PipelineError::Config("stochastic parameters out of range".into()));
        }
        Ok(())
    }
}

pub const EPISODE_WEIGHT: f64 = 0.2;

/// Stand-in for a learned policy: the classic command plus a smoothed random
/// perturbation, with confidence that widens with the perturbation and
/// occasional low-confidence episodes.
pub struct Stochastic {
    inner: Classic,
    params: StochasticParams,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    perturb: (f64, f64),
    episode_left: u32,
}

impl Stochastic {
    pub fn new(cfg: PipelineConfig, track: Arc<TrackModel>) -> Self {
        let params = cfg.stochastic;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Stochastic {
            inner: Classic::new(cfg, track),
            params,
            rng,
            noise: Normal::new(0.0, params.noise_std).expect("validated std"),
            perturb: (0.0, 0.0),
            episode_left: 0,
        }
    }

    pub fn in_episode(&self) -> bool {
        self.episode_left > 0
    }
}

impl Pipeline for Stochastic {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn tick(&mut self, input: &TickInput<'_>) -> TickOutcome {
        // The random stream advances every tick, withheld or not, so the
        // trace depends only on the seed and the tick count.
        let a = self.params.smoothing;
        self.perturb = (
            a * self.perturb.0 + self.noise.sample(&mut self.rng),
            a * self.perturb.1 + self.noise.sample(&mut self.rng),
        );
        let enter = self.rng.gen_bool(self.params.episode_prob);
        if self.episode_left > 0 {
            self.episode_left -= 1;
        } else if enter {
            self.episode_left = self.params.episode_ticks;
        }

        let base = match self.inner.command(input) {
            Ok(c) => c,
            Err(r) => return TickOutcome::Withhold(r),
        };
        let command = NormalizedCommand::new(
            (base.steering + self.perturb.0).clamp(-1.0, 1.0),
            (base.pedal + self.perturb.1).clamp(-1.0, 1.0),
            base.timestamp_ns,
        );
        let weight = if self.in_episode() { EPISODE_WEIGHT } else { 1.0 };
        TickOutcome::Propose {
            command,
            confidence: ConfidenceModel::around(
                &command,
                CLASSIC_STD + self.perturb.0.abs(),
                CLASSIC_STD + self.perturb.1.abs(),
                weight,
            ),
        }
    }
}
