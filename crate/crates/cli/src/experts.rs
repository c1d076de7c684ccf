//! Optimal demonstration episodes.
//!
//! Tree experts follow the best path found by backward induction; tape
//! experts run the scripted controller of [`TapeInstance::expert_plan`] on
//! random instances drawn from the task's length range.

use anyhow::{bail, ensure, Result};
use pcl_core::mdp::{Environment, Episode, EpisodeRecord, TapeEnv, TapeInstance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::runner::TaskEnv;

/// Steps `env` through `actions` from the observation `first`.
fn play<E: Environment>(env: &mut E, first: usize, actions: &[usize]) -> Result<Episode> {
    let mut ep = Episode::new(first);
    for &a in actions {
        let step = env.step(a)?;
        ep.push(a, &step);
        if step.done {
            break;
        }
    }
    ensure!(ep.terminated, "expert controller did not finish the episode");
    Ok(ep)
}

pub fn tape_expert(env: &TapeEnv, instance: TapeInstance) -> Result<Episode> {
    let mut env = env.clone();
    let plan = instance.expert_plan();
    let first = env.reset_with(instance);
    play(&mut env, first, &plan)
}

/// `count` expert episodes; the record seed is the instance seed.
pub fn generate(task: &TaskEnv, count: usize, seed: u64) -> Result<Vec<EpisodeRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for id in 0..count as u64 {
        let instance_seed: u64 = rng.random();
        let episode = match task {
            TaskEnv::Tree { tree, env } => {
                let mut env = env.clone();
                let first = env.reset(instance_seed);
                play(&mut env, first, &tree.optimal_actions())?
            }
            TaskEnv::Tape(env) => {
                let mut irng = ChaCha8Rng::seed_from_u64(instance_seed);
                let (lo, hi) = env.curriculum().range();
                let cap = hi.max(lo);
                let length = irng.random_range(lo..=cap);
                let instance = TapeInstance::generate(env.kind(), env.base(), length, &mut irng)?;
                tape_expert(env, instance)?
            }
        };
        out.push(EpisodeRecord {
            id,
            seed: instance_seed,
            episode,
        });
    }
    Ok(out)
}

/// Parses a tape input: rows separated by `/`, symbols as digits `0-9` or
/// letters `A-Z` (`A` = 0).
pub fn parse_input(text: &str, vocab: usize) -> Result<Vec<Vec<usize>>> {
    let rows: Vec<Vec<usize>> = text
        .split('/')
        .map(|row| {
            row.chars()
                .map(|c| match c {
                    '0'..='9' => Ok(c as usize - '0' as usize),
                    'A'..='Z' => Ok(c as usize - 'A' as usize),
                    'a'..='z' => Ok(c as usize - 'a' as usize),
                    _ => bail!("unsupported symbol `{c}` in input"),
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    if let Some(bad) = rows.iter().flatten().find(|&&s| s >= vocab) {
        bail!("symbol {bad} is outside the vocabulary of size {vocab}");
    }
    Ok(rows)
}
