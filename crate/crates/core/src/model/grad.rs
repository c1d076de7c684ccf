//! Parameter-shaped gradient storage.

/// Gradient for one parameter vector.
///
/// Dense buffers hold one slot per parameter. Sparse buffers hold an
/// unordered list of `(index, value)` contributions, duplicates allowed; they
/// keep per-episode gradients of huge tabular models cheap to build, merge
/// and apply.
#[derive(Debug, Clone, PartialEq)]
pub enum GradBuffer {
    Dense(Vec<f64>),
    Sparse { len: usize, entries: Vec<(usize, f64)> },
}

impl GradBuffer {
    pub fn dense(len: usize) -> Self {
        GradBuffer::Dense(vec![0.0; len])
    }

    pub fn sparse(len: usize) -> Self {
        GradBuffer::Sparse {
            len,
            entries: Vec::new(),
        }
    }

    /// Empty buffer of the same kind and length.
    pub fn zeros_like(&self) -> Self {
        match self {
            GradBuffer::Dense(g) => GradBuffer::dense(g.len()),
            GradBuffer::Sparse { len, .. } => GradBuffer::sparse(*len),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            GradBuffer::Dense(g) => g.len(),
            GradBuffer::Sparse { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn add(&mut self, i: usize, x: f64) {
        match self {
            GradBuffer::Dense(g) => g[i] += x,
            GradBuffer::Sparse { entries, .. } => {
                if x != 0.0 {
                    entries.push((i, x));
                }
            }
        }
    }

    /// Dense view, converting a sparse buffer in place.
    pub fn dense_mut(&mut self) -> &mut [f64] {
        if let GradBuffer::Sparse { .. } = self {
            *self = GradBuffer::Dense(self.to_dense());
        }
        match self {
            GradBuffer::Dense(g) => g,
            GradBuffer::Sparse { .. } => unreachable!(),
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        match self {
            GradBuffer::Dense(g) => g.clone(),
            GradBuffer::Sparse { len, entries } => {
                let mut g = vec![0.0; *len];
                for &(i, x) in entries {
                    g[i] += x;
                }
                g
            }
        }
    }

    /// Visits every stored contribution. Sparse buffers may visit an index
    /// more than once; the contributions add.
    pub fn for_each(&self, mut f: impl FnMut(usize, f64)) {
        match self {
            GradBuffer::Dense(g) => {
                for (i, &x) in g.iter().enumerate() {
                    if x != 0.0 {
                        f(i, x);
                    }
                }
            }
            GradBuffer::Sparse { entries, .. } => {
                for &(i, x) in entries {
                    f(i, x);
                }
            }
        }
    }

    /// `self += w·other`.
    pub fn merge_scaled(&mut self, other: &GradBuffer, w: f64) {
        assert_eq!(self.len(), other.len(), "gradient shape mismatch");
        match (&mut *self, other) {
            (GradBuffer::Dense(a), GradBuffer::Dense(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += w * y;
                }
            }
            (GradBuffer::Dense(a), GradBuffer::Sparse { entries, .. }) => {
                for &(i, y) in entries {
                    a[i] += w * y;
                }
            }
            (GradBuffer::Sparse { entries, .. }, GradBuffer::Sparse { entries: e2, .. }) => {
                entries.extend(e2.iter().map(|&(i, y)| (i, w * y)));
            }
            (GradBuffer::Sparse { .. }, GradBuffer::Dense(_)) => {
                self.dense_mut();
                self.merge_scaled(other, w);
            }
        }
    }

    pub fn merge(&mut self, other: &GradBuffer) {
        self.merge_scaled(other, 1.0);
    }

    pub fn scale(&mut self, w: f64) {
        match self {
            GradBuffer::Dense(g) => g.iter_mut().for_each(|x| *x *= w),
            GradBuffer::Sparse { entries, .. } => entries.iter_mut().for_each(|e| e.1 *= w),
        }
    }

    pub fn clear(&mut self) {
        match self {
            GradBuffer::Dense(g) => g.iter_mut().for_each(|x| *x = 0.0),
            GradBuffer::Sparse { entries, .. } => entries.clear(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            GradBuffer::Dense(g) => g.iter().all(|x| x.is_finite()),
            GradBuffer::Sparse { entries, .. } => entries.iter().all(|e| e.1.is_finite()),
        }
    }

    /// Squared Euclidean norm of the summed gradient.
    pub fn norm_sq(&self) -> f64 {
        match self {
            GradBuffer::Dense(g) => g.iter().map(|x| x * x).sum(),
            GradBuffer::Sparse { entries, .. } => {
                let mut sorted = entries.clone();
                sorted.sort_unstable_by_key(|e| e.0);
                let mut total = 0.0;
                let mut k = 0;
                while k < sorted.len() {
                    let i = sorted[k].0;
                    let mut acc = 0.0;
                    while k < sorted.len() && sorted[k].0 == i {
                        acc += sorted[k].1;
                        k += 1;
                    }
                    total += acc * acc;
                }
                total
            }
        }
    }

    /// Returns true if nothing non-zero was recorded.
    pub fn is_zero(&self) -> bool {
        match self {
            GradBuffer::Dense(g) => g.iter().all(|x| *x == 0.0),
            GradBuffer::Sparse { entries, .. } => entries.iter().all(|e| e.1 == 0.0),
        }
    }
}

/// Gradients for a model's two parameter groups.
///
/// For a policy/value model these are `∂/∂θ` and `∂/∂φ`. For the unified Q
/// model both are shaped like `ρ`: `policy` collects the log-probability
/// terms and `value` the value terms, so they can be scaled by separate
/// learning rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub policy: GradBuffer,
    pub value: GradBuffer,
}

impl Gradients {
    pub fn zeros_like(&self) -> Self {
        Self {
            policy: self.policy.zeros_like(),
            value: self.value.zeros_like(),
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        self.policy.merge(&other.policy);
        self.value.merge(&other.value);
    }

    pub fn clear(&mut self) {
        self.policy.clear();
        self.value.clear();
    }

    pub fn scale(&mut self, w: f64) {
        self.policy.scale(w);
        self.value.scale(w);
    }

    pub fn is_finite(&self) -> bool {
        self.policy.is_finite() && self.value.is_finite()
    }

    pub fn is_zero(&self) -> bool {
        self.policy.is_zero() && self.value.is_zero()
    }

    pub fn global_norm(&self) -> f64 {
        (self.policy.norm_sq() + self.value.norm_sq()).sqrt()
    }

    /// Rescales both groups so their joint norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let w = max_norm / norm;
            self.policy.scale(w);
            self.value.scale(w);
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_and_dense_agree() {
        let mut s = GradBuffer::sparse(5);
        let mut d = GradBuffer::dense(5);
        for (i, x) in [(1, 0.5), (3, -2.0), (1, 0.25)] {
            s.add(i, x);
            d.add(i, x);
        }
        assert_eq!(s.to_dense(), d.to_dense());
        assert_eq!(s.norm_sq(), d.norm_sq());
        let mut acc = GradBuffer::dense(5);
        acc.merge_scaled(&s, 2.0);
        assert_eq!(acc.to_dense(), vec![0.0, 1.5, 0.0, -4.0, 0.0]);
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut g = Gradients {
            policy: GradBuffer::Dense(vec![30.0, 0.0]),
            value: GradBuffer::Dense(vec![40.0]),
        };
        assert_eq!(g.clip_global_norm(10.0), 50.0);
        assert_eq!(g.policy.to_dense(), vec![6.0, 0.0]);
        assert_eq!(g.value.to_dense(), vec![8.0]);
    }

    #[test]
    fn non_finite_detected() {
        let mut s = GradBuffer::sparse(2);
        s.add(0, f64::NAN);
        assert!(!s.is_finite());
    }
}
