//! Episode replay with exponentiated-reward sampling.
//!
//! Entry `i` with total (undiscounted) reward `R_i` is drawn with probability
//! `0.1/N + 0.9·exp(αR_i − m)/Z`, where `N` is the current size, `m` the
//! largest `αR_j` and `Z = Σ_j exp(αR_j − m)`. When the buffer exceeds its
//! capacity a uniformly random non-pinned entry is evicted.

use std::io::{BufRead, Write};

use rand::Rng;
use thiserror::Error;

use crate::mdp::{read_episodes, write_episodes, EnvError, Episode, EpisodeRecord};

/// Weight of the uniform component of the sampling mixture.
pub const UNIFORM_MIX: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplayError {
    #[error("replay buffer is empty")]
    Empty,
    #[error("replay buffer over capacity with only pinned entries")]
    AllPinned,
    #[error("invalid replay configuration: {0}")]
    Config(String),
    #[error("episode reward is not finite")]
    NonFinite,
    #[error(transparent)]
    Io(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferConfig {
    pub capacity: usize,
    pub alpha: f64,
}

impl BufferConfig {
    pub fn new(capacity: usize, alpha: f64) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::Config("capacity must be >= 1".into()));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(ReplayError::Config(format!("alpha must be >= 0, got {alpha}")));
        }
        Ok(Self { capacity, alpha })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub episode: Episode,
    pub total_reward: f64,
    pub pinned: bool,
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    config: BufferConfig,
    entries: Vec<BufferEntry>,
    next_id: u64,
}

impl ReplayBuffer {
    pub fn new(config: BufferConfig) -> Self {
        Self {
            config,
            entries: Vec::new(),
            next_id: 0,
        }
    }

    pub fn config(&self) -> BufferConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn pinned_count(&self) -> usize {
        self.entries.iter().filter(|e| e.pinned).count()
    }

    /// Stores an episode and evicts if over capacity. Returns the evicted
    /// entry, which may be the one just inserted.
    pub fn insert<R: Rng + ?Sized>(
        &mut self,
        episode: Episode,
        pinned: bool,
        rng: &mut R,
    ) -> Result<Option<BufferEntry>, ReplayError> {
        let total_reward = episode.total_reward();
        if !total_reward.is_finite() {
            return Err(ReplayError::NonFinite);
        }
        if self.entries.len() >= self.config.capacity && pinned && self.entries.iter().all(|e| e.pinned) {
            return Err(ReplayError::AllPinned);
        }
        self.entries.push(BufferEntry {
            episode,
            total_reward,
            pinned,
            id: self.next_id,
        });
        self.next_id += 1;
        if self.entries.len() <= self.config.capacity {
            return Ok(None);
        }
        let candidates: Vec<usize> = (0..self.entries.len()).filter(|&i| !self.entries[i].pinned).collect();
        let victim = candidates[rng.random_range(0..candidates.len())];
        Ok(Some(self.entries.remove(victim)))
    }

    /// Inserts expert episodes as pinned entries.
    pub fn seed_experts<R: Rng + ?Sized>(&mut self, experts: Vec<Episode>, rng: &mut R) -> Result<(), ReplayError> {
        for e in experts {
            self.insert(e, true, rng)?;
        }
        Ok(())
    }

    /// Exact sampling distribution over the current entries.
    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.entries.len();
        if n == 0 {
            return Vec::new();
        }
        let alpha = self.config.alpha;
        let m = self
            .entries
            .iter()
            .map(|e| alpha * e.total_reward)
            .fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = self.entries.iter().map(|e| (alpha * e.total_reward - m).exp()).collect();
        let z: f64 = w.iter().sum();
        w.iter()
            .map(|wi| UNIFORM_MIX / n as f64 + (1.0 - UNIFORM_MIX) * wi / z)
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&Episode, ReplayError> {
        Ok(self.sample_batch(1, rng)?.pop().expect("one draw"))
    }

    /// Draws `n` episodes independently (with replacement).
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Episode>, ReplayError> {
        Ok(self.sample_indices(n, rng)?.into_iter().map(|i| &self.entries[i].episode).collect())
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>, ReplayError> {
        if self.entries.is_empty() {
            return Err(ReplayError::Empty);
        }
        let mut cdf = self.probabilities();
        let mut acc = 0.0;
        for p in &mut cdf {
            acc += *p;
            *p = acc;
        }
        let last = cdf.len() - 1;
        Ok((0..n)
            .map(|_| {
                let u = rng.random::<f64>() * acc;
                cdf.partition_point(|&c| c <= u).min(last)
            })
            .collect())
    }

    /// Writes the entries in the episode file format. The seed column
    /// carries the pinned flag (1 for experts).
    pub fn dump<W: Write>(&self, out: W) -> std::io::Result<()> {
        let records: Vec<EpisodeRecord> = self
            .entries
            .iter()
            .map(|e| EpisodeRecord {
                id: e.id,
                seed: u64::from(e.pinned),
                episode: e.episode.clone(),
            })
            .collect();
        write_episodes(out, &records)
    }

    /// Rebuilds a buffer written by [`ReplayBuffer::dump`].
    pub fn restore<R: BufRead>(input: R, config: BufferConfig) -> Result<Self, ReplayError> {
        let records = read_episodes(input)?;
        if records.len() > config.capacity {
            return Err(ReplayError::Config(format!(
                "dump holds {} episodes, capacity is {}",
                records.len(),
                config.capacity
            )));
        }
        let next_id = records.iter().map(|r| r.id + 1).max().unwrap_or(0);
        let entries = records
            .into_iter()
            .map(|r| BufferEntry {
                total_reward: r.episode.total_reward(),
                pinned: r.seed == 1,
                id: r.id,
                episode: r.episode,
            })
            .collect();
        Ok(Self { config, entries, next_id })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ep(reward: f64) -> Episode {
        Episode {
            observations: vec![0, 1],
            actions: vec![0],
            rewards: vec![reward],
            terminated: true,
        }
    }

    fn buffer(capacity: usize, alpha: f64) -> ReplayBuffer {
        ReplayBuffer::new(BufferConfig::new(capacity, alpha).unwrap())
    }

    #[test]
    fn formula_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = buffer(10, 0.0);
        for r in [1.0, -3.0, 7.5] {
            b.insert(ep(r), false, &mut rng).unwrap();
        }
        for p in b.probabilities() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut b = buffer(10, 1.0);
        b.insert(ep(0.0), false, &mut rng).unwrap();
        b.insert(ep(2f64.ln()), false, &mut rng).unwrap();
        let p = b.probabilities();
        assert!((p[0] - 0.35).abs() < 1e-15 && (p[1] - 0.65).abs() < 1e-15);
        let mut b = buffer(10, 1.0);
        b.insert(ep(4.0), false, &mut rng).unwrap();
        b.insert(ep(4.0), false, &mut rng).unwrap();
        assert_eq!(b.probabilities(), vec![0.5, 0.5]);
    }

    #[test]
    fn large_rewards_do_not_overflow() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = buffer(10, 1.0);
        b.insert(ep(1000.0), false, &mut rng).unwrap();
        b.insert(ep(999.0), false, &mut rng).unwrap();
        let p = b.probabilities();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn capacity_and_pinning() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = buffer(100, 1.0);
        b.seed_experts((0..10).map(|_| ep(20.0)).collect(), &mut rng).unwrap();
        for i in 0..10_000 {
            b.insert(ep(i as f64 * 1e-3), false, &mut rng).unwrap();
            assert!(b.len() <= 100);
        }
        assert_eq!(b.pinned_count(), 10);
        let p = b.probabilities();
        for (e, pi) in b.entries().iter().zip(&p) {
            if e.pinned {
                assert!(*pi >= UNIFORM_MIX / b.len() as f64);
            }
        }
    }

    #[test]
    fn all_pinned_overflow_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = buffer(2, 1.0);
        b.insert(ep(1.0), true, &mut rng).unwrap();
        b.insert(ep(1.0), true, &mut rng).unwrap();
        assert_eq!(b.insert(ep(1.0), true, &mut rng), Err(ReplayError::AllPinned));
        // a regular episode is admitted and immediately evicted
        let evicted = b.insert(ep(5.0), false, &mut rng).unwrap().unwrap();
        assert_eq!(evicted.total_reward, 5.0);
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut b = buffer(50, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..80 {
            b.insert(ep((i % 7) as f64), false, &mut rng).unwrap();
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(b.sample_indices(100, &mut r1).unwrap(), b.sample_indices(100, &mut r2).unwrap());
        assert_eq!(buffer(3, 1.0).sample(&mut r1), Err(ReplayError::Empty));
    }

    #[test]
    fn dump_restore_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = buffer(4, 1.0);
        b.insert(ep(20.0), true, &mut rng).unwrap();
        for r in [0.5, -1.0, 2.0, 3.0] {
            b.insert(ep(r), false, &mut rng).unwrap();
        }
        let mut out = Vec::new();
        b.dump(&mut out).unwrap();
        let back = ReplayBuffer::restore(out.as_slice(), b.config()).unwrap();
        assert_eq!(back, b);
    }
}
