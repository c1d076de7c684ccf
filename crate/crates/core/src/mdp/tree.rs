use rand::Rng;

use super::{EnvError, TabularMdp};

/// Return of the best root-to-leaf path after normalization.
pub const TREE_OPTIMAL_RETURN: f64 = 20.0;

/// Full binary decision tree with random edge rewards.
///
/// Nodes use heap numbering: the root is 0 and node `v` has children
/// `2v + 1` (action 0) and `2v + 2` (action 1). The reward of an edge is
/// stored on the child it leads to. Leaves are terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTree {
    depth: usize,
    edge_reward: Vec<f64>,
    scale: f64,
}

impl SyntheticTree {
    /// Samples edge rewards uniformly on `[−1, 1]` and rescales them so the
    /// best root-to-leaf path totals [`TREE_OPTIMAL_RETURN`]. Draws whose best
    /// path is not positive are discarded and resampled.
    pub fn generate<R: Rng + ?Sized>(depth: usize, rng: &mut R) -> Result<Self, EnvError> {
        if depth == 0 || depth > 26 {
            return Err(EnvError::InvalidConfig(format!(
                "tree depth must be in 1..=26, got {depth}"
            )));
        }
        let n = (1usize << (depth + 1)) - 1;
        loop {
            let mut edge_reward = vec![0.0; n];
            for r in edge_reward.iter_mut().skip(1) {
                *r = rng.random_range(-1.0..=1.0);
            }
            let best = best_path_totals(depth, &edge_reward)[0];
            if best > 0.0 {
                let scale = TREE_OPTIMAL_RETURN / best;
                for r in &mut edge_reward {
                    *r *= scale;
                }
                return Ok(Self {
                    depth,
                    edge_reward,
                    scale,
                });
            }
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_nodes(&self) -> usize {
        self.edge_reward.len()
    }

    /// Multiplier applied to the raw `[−1, 1]` draws.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn is_leaf(&self, v: usize) -> bool {
        v >= (1usize << self.depth) - 1
    }

    pub fn child(&self, v: usize, action: usize) -> usize {
        2 * v + 1 + action
    }

    /// Reward for taking `action` at node `v`.
    pub fn edge_reward(&self, v: usize, action: usize) -> f64 {
        self.edge_reward[self.child(v, action)]
    }

    /// Best achievable total from each node to a leaf.
    pub fn best_totals(&self) -> Vec<f64> {
        best_path_totals(self.depth, &self.edge_reward)
    }

    /// Actions of the best path (lowest action on ties).
    pub fn optimal_actions(&self) -> Vec<usize> {
        let best = self.best_totals();
        let mut v = 0;
        let mut actions = Vec::with_capacity(self.depth);
        while !self.is_leaf(v) {
            let q0 = self.edge_reward(v, 0) + best[self.child(v, 0)];
            let q1 = self.edge_reward(v, 1) + best[self.child(v, 1)];
            let a = usize::from(q1 > q0);
            actions.push(a);
            v = self.child(v, a);
        }
        actions
    }

    /// Converts to an explicit tabular MDP with the given discount.
    pub fn to_mdp(&self, gamma: f64) -> Result<TabularMdp, EnvError> {
        let n = self.n_nodes();
        let rows = 2 * n;
        let mut offsets = Vec::with_capacity(rows + 1);
        let mut next = Vec::with_capacity(rows);
        let mut reward = Vec::with_capacity(rows);
        let mut terminal = Vec::with_capacity(n);
        offsets.push(0);
        for v in 0..n {
            let leaf = self.is_leaf(v);
            terminal.push(leaf);
            for a in 0..2 {
                if leaf {
                    next.push(v as u32);
                    reward.push(0.0);
                } else {
                    next.push(self.child(v, a) as u32);
                    reward.push(self.edge_reward(v, a));
                }
                offsets.push(next.len());
            }
        }
        let prob = vec![1.0; rows];
        TabularMdp::from_parts(n, 2, gamma, 0, terminal, reward, offsets, next, prob)
    }
}

fn best_path_totals(depth: usize, edge_reward: &[f64]) -> Vec<f64> {
    let n = edge_reward.len();
    let first_leaf = (1usize << depth) - 1;
    let mut best = vec![0.0; n];
    for v in (0..first_leaf).rev() {
        let l = 2 * v + 1;
        best[v] = (edge_reward[l] + best[l]).max(edge_reward[l + 1] + best[l + 1]);
    }
    best
}

/// Samples a depth-`depth` synthetic tree and returns it as an undiscounted MDP.
pub fn build_synthetic_tree<R: Rng + ?Sized>(
    depth: usize,
    rng: &mut R,
) -> Result<TabularMdp, EnvError> {
    SyntheticTree::generate(depth, rng)?.to_mdp(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn node_count_and_optimum() {
        for depth in 1..=10 {
            let mut rng = ChaCha8Rng::seed_from_u64(depth as u64);
            let tree = SyntheticTree::generate(depth, &mut rng).unwrap();
            assert_eq!(tree.n_nodes(), (1 << (depth + 1)) - 1);
            assert!((tree.best_totals()[0] - 20.0).abs() < 1e-9);
            let bound = tree.scale();
            assert!(tree.edge_reward.iter().all(|r| r.abs() <= bound + 1e-12));
        }
    }

    #[test]
    fn depth_two_enumeration_matches_dp() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let tree = SyntheticTree::generate(2, &mut rng).unwrap();
        let mut best = f64::NEG_INFINITY;
        for a0 in 0..2 {
            for a1 in 0..2 {
                let v = tree.child(0, a0);
                let total = tree.edge_reward(0, a0) + tree.edge_reward(v, a1);
                best = best.max(total);
            }
        }
        assert!((best - tree.best_totals()[0]).abs() < 1e-12);
        assert!((best - 20.0).abs() < 1e-9);
    }

    #[test]
    fn optimal_actions_reach_twenty() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tree = SyntheticTree::generate(12, &mut rng).unwrap();
        let mut v = 0;
        let mut total = 0.0;
        for a in tree.optimal_actions() {
            total += tree.edge_reward(v, a);
            v = tree.child(v, a);
        }
        assert!(tree.is_leaf(v));
        assert!((total - 20.0).abs() < 1e-9);
    }

    #[test]
    fn mdp_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tree = SyntheticTree::generate(3, &mut rng).unwrap();
        let mdp = tree.to_mdp(1.0).unwrap();
        assert_eq!(mdp.n_states(), 15);
        assert!(mdp.is_deterministic());
        assert_eq!(mdp.successors(0, 0).next().unwrap().0, 1);
        assert_eq!(mdp.successors(2, 1).next().unwrap().0, 6);
        assert_eq!(mdp.reward(0, 1), tree.edge_reward(0, 1));
        assert!(mdp.is_terminal(7) && !mdp.is_terminal(6));
    }

    #[test]
    fn rejects_zero_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(SyntheticTree::generate(0, &mut rng).is_err());
    }
}
