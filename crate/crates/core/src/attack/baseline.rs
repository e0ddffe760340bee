//! Uniform random pixel search at a fixed query budget.
//!
//! Every query overwrites `pixels` uniformly chosen positions of the clean
//! image with uniformly chosen Write/Erase values per channel. Nothing
//! accumulates between queries; the best-reward image is reported.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{apply_actions, diff_perturbation, ActionSet, Dims, Image, PixelAction, ERASE, WRITE};

use super::{AttackError, AttackResult, Environment, Evaluation};

pub fn random_actions(rng: &mut ChaCha8Rng, dims: Dims, pixels: usize) -> ActionSet {
    ActionSet::new(
        (0..pixels)
            .map(|_| PixelAction {
                row: rng.random_range(0..dims.height),
                col: rng.random_range(0..dims.width),
                values: (0..dims.channels)
                    .map(|_| if rng.random_bool(0.5) { WRITE } else { ERASE })
                    .collect(),
            })
            .collect(),
    )
}

pub fn run_random_baseline(
    x: &Image,
    env: &Environment<'_>,
    pixels: usize,
    query_budget: u64,
    seed: u64,
) -> Result<AttackResult, AttackError> {
    let start = env.counter().get();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Image, Evaluation)> = None;
    let mut trace = Vec::new();
    let mut success = false;
    for _ in 0..query_budget {
        let candidate = apply_actions(x, &random_actions(&mut rng, x.dims(), pixels))?;
        let eval = env.evaluate(&candidate)?;
        trace.push(eval.reward);
        let better = best.as_ref().is_none_or(|(_, b)| eval.reward > b.reward);
        let hit = eval.success;
        if better || hit {
            best = Some((candidate, eval));
        }
        if hit {
            success = true;
            break;
        }
    }
    let (adversarial, final_evaluation) =
        best.unwrap_or_else(|| (x.clone(), Evaluation::of_clean(env.spec())));
    Ok(AttackResult {
        success,
        delta: diff_perturbation(x, &adversarial)?,
        queries: env.counter().get() - start,
        cycles_used: 1,
        pixels_per_cycle: pixels,
        cycle_rewards: vec![final_evaluation.reward],
        final_reward: final_evaluation.reward,
        reward_trace: trace,
        adversarial,
        final_evaluation,
    })
}
