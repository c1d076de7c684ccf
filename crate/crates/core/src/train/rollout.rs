use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mdp::{EnvError, Environment, Episode};
use crate::model::{ActorCritic, StepInput};
use crate::parallel::Execution;

/// Draws an index from log-probabilities by inversion.
pub fn sample_log_probs<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return a;
        }
    }
    // rounding left u above the total mass: take the last action with mass
    log_probs.iter().rposition(|lp| lp.exp() > 0.0).unwrap_or(0)
}

/// Runs one episode sampling actions from the model's policy. Does not call
/// [`Environment::finish_episode`].
pub fn rollout<E, M>(env: &mut E, model: &M, env_seed: u64, action_seed: u64) -> Result<Episode, EnvError>
where
    E: Environment + ?Sized,
    M: ActorCritic,
{
    let mut rng = ChaCha8Rng::seed_from_u64(action_seed);
    let obs = env.reset(env_seed);
    let mut episode = Episode::new(obs);
    let mut carry = model.initial_carry();
    let mut prev_action = None;
    loop {
        let obs = *episode.observations.last().unwrap();
        let lp = model.policy_step(&mut carry, StepInput { obs, prev_action });
        let action = sample_log_probs(&lp, &mut rng);
        let step = env.step(action)?;
        episode.push(action, &step);
        prev_action = Some(action);
        if step.done {
            return Ok(episode);
        }
    }
}

/// Rolls out one episode per seed pair on clones of `env`, in order.
pub fn rollout_batch<E, M>(env: &E, model: &M, seeds: &[(u64, u64)], exec: Execution) -> Result<Vec<Episode>, EnvError>
where
    E: Environment + Clone + Sync,
    M: ActorCritic,
{
    Ok(rollout_batch_capped(env, model, seeds, exec)?
        .into_iter()
        .map(|(ep, _)| ep)
        .collect())
}

/// Like [`rollout_batch`], pairing each episode with the clone's
/// [`Environment::max_episode_reward`].
pub fn rollout_batch_capped<E, M>(
    env: &E,
    model: &M,
    seeds: &[(u64, u64)],
    exec: Execution,
) -> Result<Vec<(Episode, Option<f64>)>, EnvError>
where
    E: Environment + Clone + Sync,
    M: ActorCritic,
{
    exec.map(seeds, |&(es, as_)| {
        let mut local = env.clone();
        let ep = rollout(&mut local, model, es, as_)?;
        Ok((ep, local.max_episode_reward()))
    })
    .into_iter()
    .collect()
}

/// Undiscounted returns of `episodes` policy rollouts on clones of `env`.
pub fn evaluate_returns<E, M>(model: &M, env: &E, episodes: usize, seed: u64, exec: Execution) -> Result<Vec<f64>, EnvError>
where
    E: Environment + Clone + Sync,
    M: ActorCritic,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<(u64, u64)> = (0..episodes).map(|_| (rng.random(), rng.random())).collect();
    Ok(rollout_batch(env, model, &seeds, exec)?.iter().map(Episode::total_reward).collect())
}

/// Mean undiscounted return with actions sampled from the policy.
pub fn evaluate<E, M>(model: &M, env: &E, episodes: usize, seed: u64) -> Result<f64, EnvError>
where
    E: Environment + Clone + Sync,
    M: ActorCritic,
{
    if episodes == 0 {
        return Ok(0.0);
    }
    let r = evaluate_returns(model, env, episodes, seed, Execution::default())?;
    Ok(r.iter().sum::<f64>() / episodes as f64)
}
