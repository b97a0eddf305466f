//! The multi-sense output layer: sense table, kernelized sense posterior,
//! Bayesian word probabilities, and the tied input-embedding composition.

pub mod kernel;

pub use kernel::{kernel_eval, kernel_grad_theta, normalization_factor};

use crate::error::{KerbsError, Result};
use crate::numerics::tensor::{norm, Tensor};
use crate::numerics::{softmax_stable, NORM_FLOOR};
use rand::Rng;

/// Borrowed view of one sense: an embedding row plus its kernel parameter.
#[derive(Debug, Clone, Copy)]
pub struct SenseRef<'a> {
    pub embedding: &'a [f64],
    pub theta: f64,
}

/// All senses of the vocabulary: embeddings `[m_sum, d]`, per-sense thetas,
/// and the allocation list mapping each slot to its owning word. A derived
/// word -> slots index is kept consistent under reallocation; the slot lists
/// stay sorted so iteration order is canonical.
#[derive(Debug, Clone)]
pub struct SenseTable {
    embeds: Tensor,
    thetas: Tensor,
    owner: Vec<usize>,
    per_word: Vec<Vec<usize>>,
    min_senses: usize,
    max_senses: usize,
}

impl SenseTable {
    pub fn new(
        vocab_size: usize,
        embeds: Tensor,
        thetas: Tensor,
        owner: Vec<usize>,
        min_senses: usize,
        max_senses: usize,
    ) -> Result<Self> {
        if embeds.shape().len() != 2 || thetas.shape().len() != 1 {
            return Err(KerbsError::Dimension(
                "sense table wants embeds [m,d] and thetas [m]".into(),
            ));
        }
        let m_sum = embeds.rows();
        if thetas.numel() != m_sum || owner.len() != m_sum {
            return Err(KerbsError::Dimension(format!(
                "sense table: {} embeds, {} thetas, {} owners",
                m_sum,
                thetas.numel(),
                owner.len()
            )));
        }
        if min_senses == 0 || min_senses > max_senses {
            return Err(KerbsError::Config(format!(
                "sense bounds {min_senses}..{max_senses}"
            )));
        }
        let mut per_word = vec![Vec::new(); vocab_size];
        for (slot, &w) in owner.iter().enumerate() {
            if w >= vocab_size {
                return Err(KerbsError::Vocab(format!(
                    "slot {slot} owned by word {w}, vocab size {vocab_size}"
                )));
            }
            per_word[w].push(slot);
        }
        let table = SenseTable {
            embeds,
            thetas,
            owner,
            per_word,
            min_senses,
            max_senses,
        };
        table.check_invariants()?;
        Ok(table)
    }

    /// Distribute `m_sum` senses over `vocab_size` words uniformly at random
    /// within the per-word bounds, with fresh random parameters.
    pub fn random<R: Rng>(
        vocab_size: usize,
        m_sum: usize,
        dim: usize,
        min_senses: usize,
        max_senses: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if vocab_size == 0 {
            return Err(KerbsError::Config("empty vocabulary".into()));
        }
        if m_sum < vocab_size * min_senses || m_sum > vocab_size * max_senses {
            return Err(KerbsError::Config(format!(
                "m_sum {m_sum} outside [{}, {}] for V={vocab_size}",
                vocab_size * min_senses,
                vocab_size * max_senses
            )));
        }
        let mut counts = vec![min_senses; vocab_size];
        let mut eligible: Vec<usize> = if min_senses < max_senses {
            (0..vocab_size).collect()
        } else {
            Vec::new()
        };
        let mut remaining = m_sum - vocab_size * min_senses;
        while remaining > 0 {
            let pick = rng.random_range(0..eligible.len());
            let w = eligible[pick];
            counts[w] += 1;
            if counts[w] == max_senses {
                eligible.swap_remove(pick);
            }
            remaining -= 1;
        }
        let mut owner = Vec::with_capacity(m_sum);
        for (w, &c) in counts.iter().enumerate() {
            owner.extend(std::iter::repeat(w).take(c));
        }
        let embeds = Tensor::rand_uniform(&[m_sum, dim], -0.08, 0.08, rng);
        let thetas = Tensor::rand_uniform(&[m_sum], -0.5, 0.5, rng);
        SenseTable::new(vocab_size, embeds, thetas, owner, min_senses, max_senses)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let total: usize = self.per_word.iter().map(|s| s.len()).sum();
        if total != self.total_senses() {
            return Err(KerbsError::Contract(format!(
                "sense conservation: {total} != {}",
                self.total_senses()
            )));
        }
        for (w, slots) in self.per_word.iter().enumerate() {
            if slots.len() < self.min_senses || slots.len() > self.max_senses {
                return Err(KerbsError::Contract(format!(
                    "word {w} owns {} senses, bounds {}..{}",
                    slots.len(),
                    self.min_senses,
                    self.max_senses
                )));
            }
            for &s in slots {
                if self.owner[s] != w {
                    return Err(KerbsError::Contract(format!(
                        "slot {s} listed under word {w} but owned by {}",
                        self.owner[s]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.per_word.len()
    }

    pub fn total_senses(&self) -> usize {
        self.owner.len()
    }

    pub fn dim(&self) -> usize {
        self.embeds.cols()
    }

    pub fn bounds(&self) -> (usize, usize) {
        (self.min_senses, self.max_senses)
    }

    pub fn slots_of(&self, word: usize) -> &[usize] {
        &self.per_word[word]
    }

    pub fn owner_of(&self, slot: usize) -> usize {
        self.owner[slot]
    }

    pub fn allocation(&self) -> &[usize] {
        &self.owner
    }

    pub fn counts(&self) -> Vec<usize> {
        self.per_word.iter().map(|s| s.len()).collect()
    }

    pub fn sense(&self, slot: usize) -> SenseRef<'_> {
        SenseRef {
            embedding: self.embeds.row(slot),
            theta: self.thetas.data()[slot],
        }
    }

    pub fn embeds(&self) -> &Tensor {
        &self.embeds
    }

    pub fn thetas(&self) -> &Tensor {
        &self.thetas
    }

    pub fn embeds_mut(&mut self) -> &mut Tensor {
        &mut self.embeds
    }

    pub fn thetas_mut(&mut self) -> &mut Tensor {
        &mut self.thetas
    }

    pub fn set_theta(&mut self, slot: usize, theta: f64) {
        self.thetas.data_mut()[slot] = theta;
    }

    pub fn set_embedding(&mut self, slot: usize, emb: &[f64]) {
        self.embeds.row_mut(slot).copy_from_slice(emb);
    }

    /// Move `slot` from its current owner to `new_word`, keeping the derived
    /// index sorted. Bound checks are the caller's job (the allocation phase
    /// picks donors that keep every word within bounds).
    pub fn reassign_slot(&mut self, slot: usize, new_word: usize) {
        let old = self.owner[slot];
        let list = &mut self.per_word[old];
        let pos = list.iter().position(|&s| s == slot).expect("slot indexed");
        list.remove(pos);
        let dst = &mut self.per_word[new_word];
        let ins = dst.partition_point(|&s| s < slot);
        dst.insert(ins, slot);
        self.owner[slot] = new_word;
    }

    /// Kernel score of `h` against every sense, in slot order.
    pub fn scores(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.dim() {
            return Err(KerbsError::Dimension(format!(
                "context of dim {} vs senses of dim {}",
                h.len(),
                self.dim()
            )));
        }
        if norm(h) == 0.0 {
            return Err(KerbsError::DegenerateVector(
                "sense scores on zero-norm context".into(),
            ));
        }
        let nh = norm(h).max(NORM_FLOOR);
        let mut out = Vec::with_capacity(self.total_senses());
        for slot in 0..self.total_senses() {
            let row = self.embeds.row(slot);
            let nw = norm(row).max(NORM_FLOOR);
            let cos = crate::numerics::tensor::dot(h, row) / (nh * nw);
            out.push(nh * nw * kernel::kernel_shape(self.thetas.data()[slot], cos));
        }
        Ok(out)
    }
}

/// Softmax distribution over all senses of all words.
#[derive(Debug, Clone)]
pub struct SenseDistribution {
    probs: Vec<f64>,
}

impl SenseDistribution {
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(KerbsError::Numeric(format!(
                "sense distribution sums to {sum}"
            )));
        }
        Ok(SenseDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Posterior probability of every sense given a context vector: softmax over
/// the kernel scores of all `m_sum` senses jointly.
pub fn sense_posterior(h: &[f64], table: &SenseTable) -> Result<SenseDistribution> {
    let scores = table.scores(h)?;
    Ok(SenseDistribution {
        probs: softmax_stable(&scores)?,
    })
}

/// Word probabilities as the sum of each word's sense probabilities.
pub fn word_probs(dist: &SenseDistribution, table: &SenseTable) -> Vec<f64> {
    let mut out = vec![0.0; table.vocab_size()];
    for (slot, &p) in dist.probs.iter().enumerate() {
        out[table.owner_of(slot)] += p;
    }
    out
}

/// A word's sense probabilities renormalized to sum to one, in slot order.
/// If they have all underflowed to zero the weights fall back to uniform.
pub fn conditional_sense_weights(
    dist: &SenseDistribution,
    word: usize,
    table: &SenseTable,
) -> Vec<f64> {
    let slots = table.slots_of(word);
    let raw: Vec<f64> = slots.iter().map(|&s| dist.probs[s]).collect();
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        return vec![1.0 / slots.len() as f64; slots.len()];
    }
    raw.iter().map(|&p| p / sum).collect()
}

/// Tied input embedding: the weighted sum of a word's sense embeddings,
/// weights aligned with `slots_of(word)`.
pub fn compose_input_embedding(
    word: usize,
    weights: &[f64],
    table: &SenseTable,
) -> Result<Vec<f64>> {
    let slots = table.slots_of(word);
    if weights.len() != slots.len() {
        return Err(KerbsError::Dimension(format!(
            "{} weights for word with {} senses",
            weights.len(),
            slots.len()
        )));
    }
    let mut out = vec![0.0; table.dim()];
    for (&w, &slot) in weights.iter().zip(slots) {
        for (o, &x) in out.iter_mut().zip(table.embeds.row(slot)) {
            *o += w * x;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table_with(
        vocab: usize,
        owner: Vec<usize>,
        embeds: Vec<Vec<f64>>,
        thetas: Vec<f64>,
    ) -> SenseTable {
        let d = embeds[0].len();
        let m = embeds.len();
        let flat: Vec<f64> = embeds.into_iter().flatten().collect();
        SenseTable::new(
            vocab,
            Tensor::matrix(m, d, flat).unwrap(),
            Tensor::vector(thetas),
            owner,
            1,
            4,
        )
        .unwrap()
    }

    #[test]
    fn identical_senses_give_uniform_posterior() {
        let table = table_with(
            2,
            vec![0, 0, 1, 1],
            vec![vec![0.3, 0.4]; 4],
            vec![0.7; 4],
        );
        let dist = sense_posterior(&[1.0, -0.5], &table).unwrap();
        for &p in dist.probs() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn single_sense_posterior_is_one() {
        let table = table_with(1, vec![0], vec![vec![1.0, 0.0]], vec![0.5]);
        let dist = sense_posterior(&[0.2, 0.9], &table).unwrap();
        assert_eq!(dist.probs(), &[1.0]);
    }

    #[test]
    fn posterior_matches_brute_force() {
        // Direct evaluation: exponentiate each kernel value and normalize,
        // no max subtraction.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let owner = vec![0, 0, 1, 1, 2, 3, 3, 4, 4];
        let embeds: Vec<Vec<f64>> = (0..9)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let thetas: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
        let table = table_with(5, owner, embeds, thetas);
        let h: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();

        let brute: Vec<f64> = {
            let ks: Vec<f64> = (0..9)
                .map(|s| {
                    let sr = table.sense(s);
                    kernel_eval(&h, sr.embedding, sr.theta).unwrap()
                })
                .collect();
            let z: f64 = ks.iter().map(|&k| k.exp()).sum();
            ks.iter().map(|&k| k.exp() / z).collect()
        };
        let dist = sense_posterior(&h, &table).unwrap();
        for (a, b) in dist.probs().iter().zip(&brute) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn word_probs_sum_sense_probs() {
        let table = table_with(
            2,
            vec![0, 0, 1],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            vec![0.1, 0.2, 0.3],
        );
        let dist = SenseDistribution {
            probs: vec![0.3, 0.2, 0.5],
        };
        let wp = word_probs(&dist, &table);
        assert!((wp[0] - 0.5).abs() < 1e-15);
        assert!((wp[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn conditional_weights_renormalize() {
        let table = table_with(
            2,
            vec![0, 0, 1],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            vec![0.0; 3],
        );
        let dist = SenseDistribution {
            probs: vec![0.3, 0.2, 0.5],
        };
        let w = conditional_sense_weights(&dist, 0, &table);
        assert!((w[0] - 0.6).abs() < 1e-12);
        assert!((w[1] - 0.4).abs() < 1e-12);
        assert_eq!(conditional_sense_weights(&dist, 1, &table), vec![1.0]);
    }

    #[test]
    fn conditional_weights_underflow_fallback() {
        let table = table_with(
            1,
            vec![0, 0],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.0; 2],
        );
        // Tiny but positive probabilities still renormalize cleanly.
        let dist = SenseDistribution {
            probs: vec![1e-300, 1e-300],
        };
        assert_eq!(conditional_sense_weights(&dist, 0, &table), vec![0.5, 0.5]);
        // Exact zeros hit the uniform fallback.
        let dist = SenseDistribution {
            probs: vec![0.0, 0.0],
        };
        assert_eq!(conditional_sense_weights(&dist, 0, &table), vec![0.5, 0.5]);
    }

    #[test]
    fn compose_single_sense_is_exact_lookup() {
        let table = table_with(1, vec![0], vec![vec![0.25, -1.5, 3.0]], vec![0.1]);
        let e = compose_input_embedding(0, &[1.0], &table).unwrap();
        assert_eq!(e, vec![0.25, -1.5, 3.0]);
    }

    #[test]
    fn compose_symmetric_weights_cancel() {
        let u = vec![0.5, -0.25, 1.0];
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        let table = table_with(1, vec![0, 0], vec![u, neg], vec![0.0; 2]);
        let e = compose_input_embedding(0, &[0.5, 0.5], &table).unwrap();
        assert_eq!(e, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn compose_matches_hand_computed_combination() {
        let a = vec![0.2, -0.7];
        let b = vec![1.4, 0.3];
        let table = table_with(1, vec![0, 0], vec![a.clone(), b.clone()], vec![0.0; 2]);
        let e = compose_input_embedding(0, &[0.6, 0.4], &table).unwrap();
        for i in 0..2 {
            assert!((e[i] - (0.6 * a[i] + 0.4 * b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_rejects_weight_length_mismatch() {
        let table = table_with(1, vec![0, 0], vec![vec![1.0], vec![2.0]], vec![0.0; 2]);
        assert!(matches!(
            compose_input_embedding(0, &[1.0], &table),
            Err(KerbsError::Dimension(_))
        ));
    }

    #[test]
    fn posterior_then_word_probs_is_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let v = rng.random_range(2..6);
            let m_sum = rng.random_range(v..=4 * v);
            let table = SenseTable::random(v, m_sum, 3, 1, 4, &mut rng).unwrap();
            let h: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            if norm(&h) == 0.0 {
                continue;
            }
            let dist = sense_posterior(&h, &table).unwrap();
            let sum_s: f64 = dist.probs().iter().sum();
            assert!((sum_s - 1.0).abs() < 1e-9);
            let wp = word_probs(&dist, &table);
            assert!(wp.iter().all(|&p| p >= 0.0));
            let sum_w: f64 = wp.iter().sum();
            assert!((sum_w - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_norm_context_is_rejected() {
        let table = table_with(1, vec![0], vec![vec![1.0, 0.0]], vec![0.5]);
        assert!(matches!(
            sense_posterior(&[0.0, 0.0], &table),
            Err(KerbsError::DegenerateVector(_))
        ));
    }

    #[test]
    fn random_table_respects_bounds_and_conservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let v = rng.random_range(3..40);
            let m_sum = rng.random_range(v..=4 * v);
            let table = SenseTable::random(v, m_sum, 4, 1, 4, &mut rng).unwrap();
            assert_eq!(table.counts().iter().sum::<usize>(), m_sum);
            assert!(table
                .counts()
                .iter()
                .all(|&c| (1..=4).contains(&c)));
            table.check_invariants().unwrap();
        }
    }

    #[test]
    fn infeasible_allocation_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            SenseTable::random(3, 2, 4, 1, 4, &mut rng),
            Err(KerbsError::Config(_))
        ));
        assert!(matches!(
            SenseTable::random(3, 13, 4, 1, 4, &mut rng),
            Err(KerbsError::Config(_))
        ));
    }
}
