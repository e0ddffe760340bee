//! The remember-and-forget attack loop.
//!
//! A Remember process trains a fresh agent against one fixed input image:
//! every epoch samples `𝒩` pixel actions, queries the victim, scores the
//! result and keeps the best image in [`Memory`]. It ends when the reward has
//! been bounded (relative gain below `η`) for `T` consecutive epochs, when the
//! attack succeeds, or at the epoch cap.
//!
//! The Forget step resets the agent and memory and feeds the best image back
//! in, so each cycle can add at most `𝒩` more pixels on top of the last.

mod baseline;
mod memory;
mod reward;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{reinforce_update_many, AgentError, PolicyShape, SampledBatch, TrainState};
use crate::image::{apply_actions, diff_perturbation, Image, ImageError, Perturbation};
use crate::victims::{
    detected_objects, object_count, predicted_class, query_classifier, query_detector, Classifier,
    ClassifierOutput, Detection, Detector, QueryCounter, VictimError,
};

pub use baseline::{random_actions, run_random_baseline};
pub use memory::Memory;
pub use reward::{bound_check, reward_classification, reward_detection, BOUND_GUARD};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Victim(#[from] VictimError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error("nothing to attack: {0}")]
    NoTarget(String),
}

/// Pixels perturbed per Remember process: `max(1, ⌊(H + W)/2 · α⌋)`.
pub fn pixel_budget(height: usize, width: usize, alpha: f64) -> usize {
    let raw = (height + width) as f64 / 2.0 * alpha;
    // tolerate representation error such as 0.05 * 560 = 28.000000000000004
    ((raw + 1e-9).floor() as usize).max(1)
}

/// How many clean objects must disappear for a detection attack to count as
/// a success.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RemovalTarget {
    /// `n(x̄) < n(x)`.
    #[default]
    Any,
    /// `n(x̄) = 0`.
    All,
    /// `(n(x) − n(x̄)) / n(x) ≥ f`.
    Fraction(f64),
}

impl RemovalTarget {
    pub fn reached(&self, clean: usize, remaining: usize) -> bool {
        match *self {
            RemovalTarget::Any => remaining < clean,
            RemovalTarget::All => remaining == 0,
            RemovalTarget::Fraction(f) => {
                clean > 0 && (clean as f64 - remaining as f64) / clean as f64 >= f
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Pixel attack rate α.
    pub alpha: f64,
    /// Bound threshold η.
    pub eta: f64,
    /// Consecutive bounded epochs T that count as convergence.
    pub convergence_epochs: usize,
    /// Forget-cycle cap.
    pub max_cycles: usize,
    /// Remember-epoch cap per cycle.
    pub max_epochs_per_cycle: usize,
    pub learning_rate: f64,
    /// Action sets sampled (and queries issued) per epoch.
    pub batch_size: usize,
    pub seed: u64,
    pub use_memory: bool,
    pub use_initialization: bool,
    pub removal_target: RemovalTarget,
}

impl AttackConfig {
    /// α = 0.01, T = 3.
    pub fn classification() -> Self {
        Self {
            alpha: 0.01,
            eta: 0.05,
            convergence_epochs: 3,
            max_cycles: 100,
            max_epochs_per_cycle: 500,
            learning_rate: 0.1,
            batch_size: 1,
            seed: 0,
            use_memory: true,
            use_initialization: true,
            removal_target: RemovalTarget::Any,
        }
    }

    /// α = 0.05, T = 20.
    pub fn detection() -> Self {
        Self {
            alpha: 0.05,
            convergence_epochs: 20,
            ..Self::classification()
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: &str| Err(AttackError::Config(m.to_string()));
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad("alpha must be > 0");
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad("eta must be > 0");
        }
        if self.convergence_epochs == 0 {
            return bad("convergence_epochs (T) must be ≥ 1");
        }
        if self.max_cycles == 0 {
            return bad("max_cycles must be ≥ 1");
        }
        if self.max_epochs_per_cycle == 0 {
            return bad("max_epochs_per_cycle must be ≥ 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and ≥ 0");
        }
        if let RemovalTarget::Fraction(f) = self.removal_target {
            if !(f > 0.0 && f <= 1.0) {
                return bad("removal fraction must be in (0, 1]");
            }
        }
        Ok(())
    }

    pub fn pixels_for(&self, image: &Image) -> usize {
        pixel_budget(image.height(), image.width(), self.alpha)
    }
}

/// What the reward is measured against.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardSpec {
    /// True label and the clean output `f(x)`.
    Classification {
        label: usize,
        clean: ClassifierOutput,
    },
    /// Clean detections, all above the detection threshold.
    Detection {
        clean: Vec<Detection>,
        target: RemovalTarget,
    },
}

#[derive(Clone, Copy)]
pub enum Victim<'a> {
    Classifier(&'a dyn Classifier),
    Detector(&'a dyn Detector),
}

/// Outcome of one scored query.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub reward: f64,
    pub success: bool,
    /// Classification: predicted class. Detection: objects remaining.
    pub outcome: usize,
    /// Detection only: the objects still above threshold.
    pub detections: Vec<Detection>,
}

impl Evaluation {
    /// The evaluation of the clean image itself, known without a query.
    pub fn of_clean(spec: &RewardSpec) -> Self {
        match spec {
            RewardSpec::Classification { label, .. } => Self {
                reward: 0.0,
                success: false,
                outcome: *label,
                detections: Vec::new(),
            },
            RewardSpec::Detection { clean, .. } => Self {
                reward: 0.0,
                success: false,
                outcome: clean.len(),
                detections: clean.clone(),
            },
        }
    }
}

/// The victim plus everything needed to score a perturbed image.
pub struct Environment<'a> {
    victim: Victim<'a>,
    counter: QueryCounter,
    spec: RewardSpec,
}

impl<'a> Environment<'a> {
    pub fn new(victim: Victim<'a>, counter: QueryCounter, spec: RewardSpec) -> Result<Self, AttackError> {
        match (&victim, &spec) {
            (Victim::Classifier(_), RewardSpec::Classification { label, clean }) => {
                if *label >= clean.num_classes() {
                    return Err(AttackError::Config(format!(
                        "label {label} outside {} classes",
                        clean.num_classes()
                    )));
                }
            }
            (Victim::Detector(_), RewardSpec::Detection { clean, .. }) => {
                if clean.is_empty() {
                    return Err(AttackError::NoTarget("no clean detections".into()));
                }
                if clean.iter().any(|d| d.confidence <= 0.5) {
                    return Err(AttackError::Config(
                        "clean detections must have confidence > 0.5".into(),
                    ));
                }
            }
            _ => return Err(AttackError::Config("victim and reward spec disagree".into())),
        }
        Ok(Self {
            victim,
            counter,
            spec,
        })
    }

    /// Queries the clean image once and builds a classification environment.
    pub fn classification(
        victim: &'a dyn Classifier,
        counter: QueryCounter,
        clean: &Image,
        label: usize,
    ) -> Result<Self, AttackError> {
        let out = query_classifier(victim, &counter, clean)?;
        Self::new(
            Victim::Classifier(victim),
            counter,
            RewardSpec::Classification { label, clean: out },
        )
    }

    /// Queries the clean image once and builds a detection environment.
    pub fn detection(
        victim: &'a dyn Detector,
        counter: QueryCounter,
        clean: &Image,
        target: RemovalTarget,
    ) -> Result<Self, AttackError> {
        let out = query_detector(victim, &counter, clean)?;
        Self::new(
            Victim::Detector(victim),
            counter,
            RewardSpec::Detection {
                clean: detected_objects(&out),
                target,
            },
        )
    }

    pub fn spec(&self) -> &RewardSpec {
        &self.spec
    }

    pub fn counter(&self) -> &QueryCounter {
        &self.counter
    }

    /// One counted query, scored against the clean reference.
    pub fn evaluate(&self, perturbed: &Image) -> Result<Evaluation, VictimError> {
        match (&self.victim, &self.spec) {
            (Victim::Classifier(v), RewardSpec::Classification { label, clean }) => {
                let out = query_classifier(*v, &self.counter, perturbed)?;
                let pred = predicted_class(&out);
                Ok(Evaluation {
                    reward: reward_classification(clean, &out, *label),
                    success: pred != *label,
                    outcome: pred,
                    detections: Vec::new(),
                })
            }
            (Victim::Detector(v), RewardSpec::Detection { clean, target }) => {
                let out = query_detector(*v, &self.counter, perturbed)?;
                let remaining = object_count(&out);
                Ok(Evaluation {
                    reward: reward_detection(clean, &out),
                    success: target.reached(clean.len(), remaining),
                    outcome: remaining,
                    detections: detected_objects(&out),
                })
            }
            _ => unreachable!("checked in Environment::new"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RememberExit {
    /// Bounded for T consecutive epochs.
    Converged,
    Success,
    EpochCap,
    /// The agent produced a non-finite value; treated as convergence.
    Diverged,
}

#[derive(Debug, Clone)]
pub struct RememberOutcome {
    pub image: Image,
    pub reward: f64,
    pub exit: RememberExit,
    pub epochs: usize,
    pub queries: u64,
    /// Every query's reward, in order.
    pub rewards: Vec<f64>,
    /// `r*` after each epoch.
    pub best_trace: Vec<f64>,
    /// Evaluation of the returned image, when it was queried in this process.
    pub evaluation: Option<Evaluation>,
}

/// Runs one Remember process on `input`, whose reward `input_reward` is
/// already known.
pub fn remember_process(
    input: &Image,
    input_reward: f64,
    env: &Environment<'_>,
    cfg: &AttackConfig,
    state: &mut TrainState,
) -> Result<RememberOutcome, AttackError> {
    let start_queries = env.counter.get();
    let mut memory = Memory::seeded(input.clone(), input_reward);
    let mut last: Option<(Image, Evaluation)> = None;
    let mut best_eval: Option<Evaluation> = None;
    let mut rewards = Vec::new();
    let mut best_trace = Vec::new();
    state.epoch = 0;

    let finish = |exit: RememberExit,
                  memory: Memory,
                  last: Option<(Image, Evaluation)>,
                  best_eval: Option<Evaluation>,
                  rewards: Vec<f64>,
                  best_trace: Vec<f64>,
                  epochs: usize| {
        let (image, reward, evaluation) = match (cfg.use_memory, last) {
            (false, Some((img, ev))) => (img, ev.reward, Some(ev)),
            _ => {
                let carried = memory.holds_carried();
                let (img, r) = memory.into_best();
                (img, r, if carried { None } else { best_eval })
            }
        };
        RememberOutcome {
            image,
            reward,
            exit,
            epochs,
            queries: env.counter.get() - start_queries,
            rewards,
            best_trace,
            evaluation,
        }
    };

    for epoch in 1..=cfg.max_epochs_per_cycle {
        state.epoch = epoch;
        let prev_best = memory.best_reward();
        let mut samples: Vec<(SampledBatch, f64)> = Vec::with_capacity(cfg.batch_size);
        let mut epoch_max = f64::NEG_INFINITY;
        for _ in 0..cfg.batch_size {
            let batch = match state.sample(input) {
                Ok(b) => b,
                Err(AgentError::NonFinite(what)) => {
                    debug!("agent diverged ({what}) at epoch {epoch}");
                    return Ok(finish(RememberExit::Diverged, memory, last, best_eval, rewards, best_trace, epoch - 1));
                }
                Err(e) => return Err(AttackError::Config(e.to_string())),
            };
            let perturbed = apply_actions(input, &batch.action_set)?;
            let eval = env.evaluate(&perturbed)?;
            rewards.push(eval.reward);
            epoch_max = epoch_max.max(eval.reward);
            if memory.offer(eval.reward, &perturbed) {
                best_eval = Some(eval.clone());
            }
            if eval.success {
                best_trace.push(memory.best_reward());
                return Ok(RememberOutcome {
                    image: perturbed,
                    reward: eval.reward,
                    exit: RememberExit::Success,
                    epochs: epoch,
                    queries: env.counter.get() - start_queries,
                    rewards,
                    best_trace,
                    evaluation: Some(eval),
                });
            }
            samples.push((batch, eval.reward));
            last = Some((perturbed, eval));
        }
        best_trace.push(memory.best_reward());

        let refs: Vec<(&SampledBatch, f64)> = samples.iter().map(|(b, r)| (b, *r)).collect();
        match reinforce_update_many(state, input, &refs, cfg.learning_rate) {
            Ok(()) => {}
            Err(AgentError::NonFinite(what)) => {
                debug!("update diverged ({what}) at epoch {epoch}");
                return Ok(finish(RememberExit::Diverged, memory, last, best_eval, rewards, best_trace, epoch));
            }
            Err(e) => return Err(AttackError::Config(e.to_string())),
        }

        if bound_check(epoch_max, prev_best, cfg.eta) {
            memory.bounded_streak += 1;
        } else {
            memory.bounded_streak = 0;
        }
        if memory.bounded_streak >= cfg.convergence_epochs {
            return Ok(finish(RememberExit::Converged, memory, last, best_eval, rewards, best_trace, epoch));
        }
    }
    Ok(finish(
        RememberExit::EpochCap,
        memory,
        last,
        best_eval,
        rewards,
        best_trace,
        cfg.max_epochs_per_cycle,
    ))
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub success: bool,
    pub adversarial: Image,
    pub delta: Perturbation,
    /// Queries issued by the attack itself (the clean reference query is not
    /// included).
    pub queries: u64,
    pub cycles_used: usize,
    /// Pixels per Remember process.
    pub pixels_per_cycle: usize,
    /// Reward of every query, across all cycles.
    pub reward_trace: Vec<f64>,
    /// Reward of the image each cycle handed forward.
    pub cycle_rewards: Vec<f64>,
    pub final_reward: f64,
    /// Victim verdict on `adversarial` (taken from the query that produced it,
    /// or the clean reference when no perturbation was ever kept).
    pub final_evaluation: Evaluation,
}

/// Full attack: Remember processes chained by Forget steps.
pub fn run_attack(x: &Image, env: &Environment<'_>, cfg: &AttackConfig) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    let start_queries = env.counter.get();
    let pixels = cfg.pixels_for(x);
    let mut state = TrainState::new(cfg.seed, PolicyShape::new(x.dims(), pixels));
    let mut input = x.clone();
    let mut input_reward = 0.0;
    let mut input_eval = Evaluation::of_clean(env.spec());
    let mut reward_trace = Vec::new();
    let mut cycle_rewards = Vec::new();
    let mut success = false;
    let mut cycles_used = 0;

    for cycle in 1..=cfg.max_cycles {
        if cycle > 1 && cfg.use_initialization {
            state.reinitialize();
        }
        let outcome = remember_process(&input, input_reward, env, cfg, &mut state)?;
        cycles_used = cycle;
        reward_trace.extend_from_slice(&outcome.rewards);
        cycle_rewards.push(outcome.reward);
        debug!(
            "cycle {cycle}: {:?} after {} epochs, r* = {:.4}",
            outcome.exit, outcome.epochs, outcome.reward
        );
        input = outcome.image;
        input_reward = outcome.reward;
        if let Some(ev) = outcome.evaluation {
            input_eval = ev;
        }
        if outcome.exit == RememberExit::Success {
            success = true;
            break;
        }
    }
    let delta = diff_perturbation(x, &input)?;
    Ok(AttackResult {
        success,
        adversarial: input,
        delta,
        queries: env.counter.get() - start_queries,
        cycles_used,
        pixels_per_cycle: pixels,
        reward_trace,
        cycle_rewards,
        final_reward: input_reward,
        final_evaluation: input_eval,
    })
}
