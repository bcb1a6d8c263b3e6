//! Linear-chain CRF over tag ids: path scoring, the forward algorithm,
//! forward-backward marginals, negative log-likelihood and Viterbi decoding.
//!
//! Tags are plain `usize` ids here. With the BILOU product tag set the ids
//! are `O=0, B=1, I=2, L=3, U=4` (see [`crate::text::Tag`]).

use crate::error::{Error, Result};
use crate::tensor::log_sum_exp;
use crate::text::Tag;

/// Emission and transition scores for one sequence.
///
/// `transitions[a * n_tags + b]` scores the move `a -> b`.
#[derive(Clone, Debug, PartialEq)]
pub struct TagLattice {
    len: usize,
    n_tags: usize,
    emissions: Vec<f64>,
    transitions: Vec<f64>,
    start: Vec<f64>,
    end: Vec<f64>,
}

impl TagLattice {
    pub fn new(
        n_tags: usize,
        emissions: Vec<f64>,
        transitions: Vec<f64>,
        start: Vec<f64>,
        end: Vec<f64>,
    ) -> Result<Self> {
        if n_tags == 0 || emissions.is_empty() || !emissions.len().is_multiple_of(n_tags) {
            return Err(Error::Shape {
                op: "lattice emissions",
                left: vec![emissions.len()],
                right: vec![n_tags],
            });
        }
        if transitions.len() != n_tags * n_tags {
            return Err(Error::Shape {
                op: "lattice transitions",
                left: vec![transitions.len()],
                right: vec![n_tags, n_tags],
            });
        }
        if start.len() != n_tags || end.len() != n_tags {
            return Err(Error::Shape {
                op: "lattice start/end",
                left: vec![start.len(), end.len()],
                right: vec![n_tags],
            });
        }
        Ok(TagLattice {
            len: emissions.len() / n_tags,
            n_tags,
            emissions,
            transitions,
            start,
            end,
        })
    }

    /// A lattice of zeros, `len` positions by `n_tags`.
    pub fn zeros(len: usize, n_tags: usize) -> Self {
        TagLattice {
            len,
            n_tags,
            emissions: vec![0.0; len * n_tags],
            transitions: vec![0.0; n_tags * n_tags],
            start: vec![0.0; n_tags],
            end: vec![0.0; n_tags],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_tags(&self) -> usize {
        self.n_tags
    }

    pub fn emission(&self, pos: usize, tag: usize) -> f64 {
        self.emissions[pos * self.n_tags + tag]
    }

    pub fn emissions_mut(&mut self) -> &mut [f64] {
        &mut self.emissions
    }

    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.transitions[from * self.n_tags + to]
    }

    pub fn transitions_mut(&mut self) -> &mut [f64] {
        &mut self.transitions
    }

    pub fn start_scores(&self) -> &[f64] {
        &self.start
    }

    pub fn start_mut(&mut self) -> &mut [f64] {
        &mut self.start
    }

    pub fn end_scores(&self) -> &[f64] {
        &self.end
    }

    pub fn end_mut(&mut self) -> &mut [f64] {
        &mut self.end
    }

    fn check_tags(&self, tags: &[usize]) -> Result<()> {
        if tags.len() != self.len {
            return Err(Error::Shape {
                op: "tag sequence",
                left: vec![tags.len()],
                right: vec![self.len],
            });
        }
        if let Some(&bad) = tags.iter().find(|&&t| t >= self.n_tags) {
            return Err(Error::Invalid(format!(
                "tag id {bad} out of range for {} tags",
                self.n_tags
            )));
        }
        Ok(())
    }

    /// Unnormalized score of one tag path.
    pub fn score_sequence(&self, tags: &[usize]) -> Result<f64> {
        self.check_tags(tags)?;
        let mut score = self.start[tags[0]] + self.end[tags[self.len - 1]];
        for (pos, &tag) in tags.iter().enumerate() {
            score += self.emission(pos, tag);
        }
        for pair in tags.windows(2) {
            score += self.transition(pair[0], pair[1]);
        }
        Ok(score)
    }

    /// Forward log-messages `alpha[t * n_tags + k]`.
    fn forward(&self) -> Vec<f64> {
        let k = self.n_tags;
        let mut alpha = vec![0.0; self.len * k];
        for tag in 0..k {
            alpha[tag] = self.start[tag] + self.emission(0, tag);
        }
        let mut scratch = vec![0.0; k];
        for pos in 1..self.len {
            for tag in 0..k {
                for (prev, s) in scratch.iter_mut().enumerate() {
                    *s = alpha[(pos - 1) * k + prev] + self.transition(prev, tag);
                }
                alpha[pos * k + tag] = log_sum_exp(&scratch) + self.emission(pos, tag);
            }
        }
        alpha
    }

    fn backward_messages(&self) -> Vec<f64> {
        let k = self.n_tags;
        let mut beta = vec![0.0; self.len * k];
        let last = self.len - 1;
        beta[last * k..].copy_from_slice(&self.end);
        let mut scratch = vec![0.0; k];
        for pos in (0..last).rev() {
            for tag in 0..k {
                for (next, s) in scratch.iter_mut().enumerate() {
                    *s = self.transition(tag, next)
                        + self.emission(pos + 1, next)
                        + beta[(pos + 1) * k + next];
                }
                beta[pos * k + tag] = log_sum_exp(&scratch);
            }
        }
        beta
    }

    /// `ln Z`: log of the summed exponentiated scores of every tag path.
    pub fn log_partition(&self) -> f64 {
        let k = self.n_tags;
        let alpha = self.forward();
        let last = &alpha[(self.len - 1) * k..];
        let finals: Vec<f64> = last.iter().zip(&self.end).map(|(a, e)| a + e).collect();
        log_sum_exp(&finals)
    }

    /// Posterior marginals under the CRF distribution.
    pub fn marginals(&self) -> Marginals {
        let k = self.n_tags;
        let alpha = self.forward();
        let beta = self.backward_messages();
        let last = &alpha[(self.len - 1) * k..];
        let finals: Vec<f64> = last.iter().zip(&self.end).map(|(a, e)| a + e).collect();
        let log_z = log_sum_exp(&finals);

        let unary: Vec<f64> = alpha
            .iter()
            .zip(&beta)
            .map(|(a, b)| (a + b - log_z).exp())
            .collect();
        let mut pairwise = vec![0.0; k * k];
        for pos in 0..self.len.saturating_sub(1) {
            for from in 0..k {
                let a = alpha[pos * k + from];
                for to in 0..k {
                    let lp = a
                        + self.transition(from, to)
                        + self.emission(pos + 1, to)
                        + beta[(pos + 1) * k + to]
                        - log_z;
                    pairwise[from * k + to] += lp.exp();
                }
            }
        }
        Marginals {
            log_z,
            unary,
            pairwise,
        }
    }

    /// `ln Z - score(gold)`: the negative log-likelihood of the gold path.
    pub fn nll(&self, gold: &[usize]) -> Result<f64> {
        let score = self.score_sequence(gold)?;
        Ok(self.log_partition() - score)
    }

    /// Highest-scoring tag path, optionally restricted to paths the mask
    /// allows. Ties resolve toward the lowest tag id.
    pub fn viterbi(&self, mask: Option<&ConstraintMask>) -> Result<(Vec<usize>, f64)> {
        let k = self.n_tags;
        if let Some(m) = mask {
            if m.n_tags() != k {
                return Err(Error::Shape {
                    op: "constraint mask",
                    left: vec![m.n_tags()],
                    right: vec![k],
                });
            }
        }
        let start_ok = |t: usize| mask.is_none_or(|m| m.allowed_start[t]);
        let end_ok = |t: usize| mask.is_none_or(|m| m.allowed_end[t]);
        let trans_ok = |a: usize, b: usize| mask.is_none_or(|m| m.allowed(a, b));

        let mut delta: Vec<f64> = (0..k)
            .map(|t| {
                if start_ok(t) {
                    self.start[t] + self.emission(0, t)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let mut back = vec![0usize; self.len * k];
        let mut next = vec![0.0; k];
        for pos in 1..self.len {
            for tag in 0..k {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for prev in 0..k {
                    if !trans_ok(prev, tag) {
                        continue;
                    }
                    let s = delta[prev] + self.transition(prev, tag);
                    if s > best {
                        best = s;
                        arg = prev;
                    }
                }
                back[pos * k + tag] = arg;
                next[tag] = best + self.emission(pos, tag);
            }
            std::mem::swap(&mut delta, &mut next);
        }

        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for tag in 0..k {
            if !end_ok(tag) {
                continue;
            }
            let s = delta[tag] + self.end[tag];
            if s > best {
                best = s;
                arg = tag;
            }
        }
        if best == f64::NEG_INFINITY {
            return Err(Error::NoLegalPath);
        }
        let mut path = vec![0usize; self.len];
        path[self.len - 1] = arg;
        for pos in (1..self.len).rev() {
            path[pos - 1] = back[pos * k + path[pos]];
        }
        Ok((path, best))
    }
}

/// Result of forward-backward over a lattice.
#[derive(Clone, Debug)]
pub struct Marginals {
    pub log_z: f64,
    /// `p(y_t = k)` laid out `[len, n_tags]`.
    pub unary: Vec<f64>,
    /// `Σ_t p(y_t = a, y_{t+1} = b)` laid out `[n_tags, n_tags]`.
    pub pairwise: Vec<f64>,
}

/// Which transitions, start tags and end tags a decoded path may use.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstraintMask {
    n_tags: usize,
    allowed_transitions: Vec<bool>,
    pub allowed_start: Vec<bool>,
    pub allowed_end: Vec<bool>,
}

impl ConstraintMask {
    pub fn new(
        n_tags: usize,
        allowed_transitions: Vec<bool>,
        allowed_start: Vec<bool>,
        allowed_end: Vec<bool>,
    ) -> Result<Self> {
        if allowed_transitions.len() != n_tags * n_tags
            || allowed_start.len() != n_tags
            || allowed_end.len() != n_tags
        {
            return Err(Error::Shape {
                op: "constraint mask",
                left: vec![
                    allowed_transitions.len(),
                    allowed_start.len(),
                    allowed_end.len(),
                ],
                right: vec![n_tags],
            });
        }
        Ok(ConstraintMask {
            n_tags,
            allowed_transitions,
            allowed_start,
            allowed_end,
        })
    }

    pub fn n_tags(&self) -> usize {
        self.n_tags
    }

    pub fn allowed(&self, from: usize, to: usize) -> bool {
        self.allowed_transitions[from * self.n_tags + to]
    }

    /// Whether `tags` uses only allowed starts, ends and transitions.
    pub fn permits(&self, tags: &[usize]) -> bool {
        match (tags.first(), tags.last()) {
            (Some(&first), Some(&last)) => {
                self.allowed_start[first]
                    && self.allowed_end[last]
                    && tags.windows(2).all(|w| self.allowed(w[0], w[1]))
            }
            _ => true,
        }
    }
}

/// Legality rules of the BILOU scheme over the single-label tag set.
pub fn bilou_constraints() -> ConstraintMask {
    use Tag::*;
    let n = Tag::COUNT;
    let allowed = [
        (O, O),
        (O, B),
        (O, U),
        (B, I),
        (B, L),
        (I, I),
        (I, L),
        (L, O),
        (L, B),
        (L, U),
        (U, O),
        (U, B),
        (U, U),
    ];
    let mut transitions = vec![false; n * n];
    for (from, to) in allowed {
        transitions[from.id() * n + to.id()] = true;
    }
    let mut start = vec![false; n];
    for t in [O, B, U] {
        start[t.id()] = true;
    }
    let mut end = vec![false; n];
    for t in [O, L, U] {
        end[t.id()] = true;
    }
    ConstraintMask {
        n_tags: n,
        allowed_transitions: transitions,
        allowed_start: start,
        allowed_end: end,
    }
}
