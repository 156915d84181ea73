//! Class-imbalance mitigation: upsampling and probabilistic sampling,
//! single-task and multi-task (label-tuple) variants.
//!
//! Samplers operate on label lists and return index streams into the
//! original example list, so no data is copied. Every random decision
//! comes from a ChaCha8 generator seeded from the config: identical
//! seeds give identical index sequences.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("label list is empty")]
    EmptyLabels,
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("class {class} has no examples, cannot balance")]
    MissingClass { class: usize },
    #[error("class {class} has target probability > 0 but no examples")]
    UnreachableClass { class: usize },
    #[error("no examples to sample from")]
    NoExamples,
    #[error("lambda {0} outside [0, 1]")]
    BadLambda(f64),
}

/// A probability vector over class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Self {
        debug_assert!(probs.iter().all(|&p| p >= 0.0));
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        Distribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn l1_distance(&self, other: &Distribution) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    pub fn uniform(n_classes: usize) -> Self {
        Distribution {
            probs: vec![1.0 / n_classes as f64; n_classes],
        }
    }
}

/// Empirical class distribution: `probs[c] = count(c) / total`.
pub fn class_distribution(
    labels: &[usize],
    n_classes: usize,
) -> Result<Distribution, SamplingError> {
    let counts = class_counts(labels, n_classes)?;
    let total = labels.len() as f64;
    Ok(Distribution {
        probs: counts.iter().map(|&c| c as f64 / total).collect(),
    })
}

fn class_counts(labels: &[usize], n_classes: usize) -> Result<Vec<usize>, SamplingError> {
    if labels.is_empty() {
        return Err(SamplingError::EmptyLabels);
    }
    let mut counts = vec![0usize; n_classes];
    for &label in labels {
        if label >= n_classes {
            return Err(SamplingError::LabelOutOfRange { label, n_classes });
        }
        counts[label] += 1;
    }
    Ok(counts)
}

fn indices_by_class(labels: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &label) in labels.iter().enumerate() {
        by_class[label].push(i);
    }
    by_class
}

/// Repeats under-represented classes until all per-class counts equal the
/// largest original count. Within a class, repeats cycle through that
/// class's examples in original order; every original index appears at
/// least once.
pub fn upsample(labels: &[usize], n_classes: usize) -> Result<Vec<usize>, SamplingError> {
    let counts = class_counts(labels, n_classes)?;
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(SamplingError::MissingClass { class });
    }
    let max = *counts.iter().max().unwrap();
    let by_class = indices_by_class(labels, n_classes);
    let mut out = Vec::with_capacity(max * n_classes);
    for members in &by_class {
        for i in 0..max {
            out.push(members[i % members.len()]);
        }
    }
    Ok(out)
}

/// Multi-task upsampling: examples are grouped by their full label tuple
/// and every group is cycled up to the largest group size. Per-task
/// marginals are not necessarily uniform afterwards.
pub fn upsample_multitask(tuples: &[Vec<usize>]) -> Result<Vec<usize>, SamplingError> {
    if tuples.is_empty() {
        return Err(SamplingError::EmptyLabels);
    }
    let mut groups: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
    for (i, tuple) in tuples.iter().enumerate() {
        groups.entry(tuple.as_slice()).or_default().push(i);
    }
    let max = groups.values().map(Vec::len).max().unwrap();
    let mut out = Vec::with_capacity(max * groups.len());
    for members in groups.values() {
        for i in 0..max {
            out.push(members[i % members.len()]);
        }
    }
    Ok(out)
}

/// The desired class distribution: `lambda * original + (1 - lambda) * uniform`.
pub fn probabilistic_target(
    original: &Distribution,
    lambda: f64,
) -> Result<Distribution, SamplingError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SamplingError::BadLambda(lambda));
    }
    let n = original.n_classes() as f64;
    Ok(Distribution {
        probs: original
            .probs
            .iter()
            .map(|&p| lambda * p + (1.0 - lambda) / n)
            .collect(),
    })
}

fn draw_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    probs.len() - 1
}

/// Draws i.i.d. example indices so the class distribution converges to
/// the lambda-target: first a class from the target, then a uniform
/// example of that class.
pub struct ProbabilisticSampler {
    by_class: Vec<Vec<usize>>,
    target: Distribution,
    rng: ChaCha8Rng,
}

impl ProbabilisticSampler {
    pub fn new(
        labels: &[usize],
        n_classes: usize,
        lambda: f64,
        seed: u64,
    ) -> Result<Self, SamplingError> {
        let original = class_distribution(labels, n_classes)?;
        let target = probabilistic_target(&original, lambda)?;
        let by_class = indices_by_class(labels, n_classes);
        for (class, members) in by_class.iter().enumerate() {
            if target.probs[class] > 0.0 && members.is_empty() {
                return Err(SamplingError::UnreachableClass { class });
            }
        }
        Ok(ProbabilisticSampler {
            by_class,
            target,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn target(&self) -> &Distribution {
        &self.target
    }

    pub fn draw(&mut self) -> usize {
        let class = draw_categorical(&mut self.rng, &self.target.probs);
        let members = &self.by_class[class];
        members[self.rng.random_range(0..members.len())]
    }

    pub fn draw_n(&mut self, n_draws: usize) -> Vec<usize> {
        (0..n_draws).map(|_| self.draw()).collect()
    }
}

/// Convenience wrapper: a fresh sampler drained for `n_draws` indices.
pub fn probabilistic_sampler(
    labels: &[usize],
    n_classes: usize,
    lambda: f64,
    seed: u64,
    n_draws: usize,
) -> Result<Vec<usize>, SamplingError> {
    Ok(ProbabilisticSampler::new(labels, n_classes, lambda, seed)?.draw_n(n_draws))
}

/// Multi-task probabilistic sampling. Each draw samples every task's
/// label independently from that task's lambda-target; if an example
/// with the exact tuple exists one is drawn uniformly, otherwise the
/// tuple is resampled up to `max_rejects` times and then falls back to
/// the nearest existing tuple (minimum Hamming distance, ties to the
/// lexicographically smallest).
pub struct MultitaskProbabilisticSampler {
    targets: Vec<Distribution>,
    groups: BTreeMap<Vec<usize>, Vec<usize>>,
    max_rejects: usize,
    rng: ChaCha8Rng,
}

impl MultitaskProbabilisticSampler {
    pub fn new(
        tuples: &[Vec<usize>],
        n_classes: &[usize],
        lambda: f64,
        seed: u64,
        max_rejects: usize,
    ) -> Result<Self, SamplingError> {
        if tuples.is_empty() {
            return Err(SamplingError::NoExamples);
        }
        let n_tasks = n_classes.len();
        let mut targets = Vec::with_capacity(n_tasks);
        for (task, &n) in n_classes.iter().enumerate() {
            let labels: Vec<usize> = tuples.iter().map(|t| t[task]).collect();
            let original = class_distribution(&labels, n)?;
            let target = probabilistic_target(&original, lambda)?;
            for class in 0..n {
                if target.probs[class] > 0.0 && !labels.contains(&class) {
                    return Err(SamplingError::UnreachableClass { class });
                }
            }
            targets.push(target);
        }
        let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
        for (i, tuple) in tuples.iter().enumerate() {
            groups.entry(tuple.clone()).or_default().push(i);
        }
        Ok(MultitaskProbabilisticSampler {
            targets,
            groups,
            max_rejects,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn targets(&self) -> &[Distribution] {
        &self.targets
    }

    fn sample_tuple(&mut self) -> Vec<usize> {
        let mut tuple = Vec::with_capacity(self.targets.len());
        for task in 0..self.targets.len() {
            tuple.push(draw_categorical(&mut self.rng, self.targets[task].probs()));
        }
        tuple
    }

    fn fallback_tuple(&self, wanted: &[usize]) -> &Vec<usize> {
        self.groups
            .keys()
            .min_by_key(|existing| {
                let hamming: usize = existing
                    .iter()
                    .zip(wanted)
                    .map(|(a, b)| usize::from(a != b))
                    .sum();
                // BTreeMap iterates keys in ascending order, so min_by_key
                // resolves distance ties to the lexicographically smallest.
                hamming
            })
            .expect("groups non-empty by construction")
    }

    pub fn draw(&mut self) -> usize {
        let mut tuple = self.sample_tuple();
        let mut rejects = 0;
        while !self.groups.contains_key(&tuple) && rejects < self.max_rejects {
            tuple = self.sample_tuple();
            rejects += 1;
        }
        let key = if self.groups.contains_key(&tuple) {
            tuple
        } else {
            self.fallback_tuple(&tuple).clone()
        };
        let members = &self.groups[&key];
        members[self.rng.random_range(0..members.len())]
    }

    pub fn draw_n(&mut self, n_draws: usize) -> Vec<usize> {
        (0..n_draws).map(|_| self.draw()).collect()
    }
}

/// How the training loop resamples its data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerMode {
    None,
    Upsample,
    Probabilistic,
}

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub lambda: f64,
    pub seed: u64,
    pub max_rejects: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mode: SamplerMode::None,
            lambda: 0.6,
            seed: 17,
            max_rejects: 100,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn class_distribution_counts() {
        let d = class_distribution(&[0, 0, 1, 2], 3).unwrap();
        assert_eq!(d.probs(), &[0.5, 0.25, 0.25]);
        let d = class_distribution(&[1, 1], 2).unwrap();
        assert_eq!(d.probs(), &[0.0, 1.0]);
        assert!(matches!(
            class_distribution(&[], 2),
            Err(SamplingError::EmptyLabels)
        ));
        assert!(matches!(
            class_distribution(&[5], 2),
            Err(SamplingError::LabelOutOfRange { label: 5, .. })
        ));
    }

    #[test]
    fn upsample_balances_exactly() {
        // Counts {0: 4, 1: 2}: each minority index twice, total 8.
        let labels = [0, 0, 0, 0, 1, 1];
        let out = upsample(&labels, 2).unwrap();
        assert_eq!(out.len(), 8);
        let count = |idx: usize| out.iter().filter(|&&i| i == idx).count();
        for i in 0..4 {
            assert_eq!(count(i), 1);
        }
        assert_eq!(count(4), 2);
        assert_eq!(count(5), 2);
    }

    #[test]
    fn upsample_identity_when_balanced() {
        let labels = [0, 1, 0, 1];
        let mut out = upsample(&labels, 2).unwrap();
        out.sort_unstable();
        assert_eq!(out, vec![0, 1, 2, 3]);
    }

    #[test]
    fn upsample_cycles_in_order() {
        // Counts {0: 3, 1: 2}: minority pattern b0, b1, b0.
        let labels = [0, 0, 0, 1, 1];
        let out = upsample(&labels, 2).unwrap();
        assert_eq!(out, vec![0, 1, 2, 3, 4, 3]);
    }

    #[test]
    fn upsample_missing_class() {
        assert!(matches!(
            upsample(&[0, 0], 2),
            Err(SamplingError::MissingClass { class: 1 })
        ));
    }

    #[test]
    fn multitask_upsample_balances_groups() {
        // Counts {(0,0): 2, (0,1): 1, (1,1): 2} -> each group 2, total 6.
        let tuples = vec![vec![0, 0], vec![0, 0], vec![0, 1], vec![1, 1], vec![1, 1]];
        let out = upsample_multitask(&tuples).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(out.iter().filter(|&&i| i == 2).count(), 2);

        let single = vec![vec![0, 1], vec![0, 1]];
        let mut id = upsample_multitask(&single).unwrap();
        id.sort_unstable();
        assert_eq!(id, vec![0, 1]);
    }

    #[test]
    fn multitask_upsample_marginals_by_hand() {
        // Counts {(0,0): 3, (1,1): 1}: the (1,1) example appears 3 times,
        // so the task-0 marginal lands on (0.5, 0.5).
        let tuples = vec![vec![0, 0], vec![0, 0], vec![0, 0], vec![1, 1]];
        let out = upsample_multitask(&tuples).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(out.iter().filter(|&&i| i == 3).count(), 3);
        let task0: Vec<usize> = out.iter().map(|&i| tuples[i][0]).collect();
        let marginal = class_distribution(&task0, 2).unwrap();
        assert_eq!(marginal.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn target_boundaries_and_hand_value() {
        let original = Distribution::new(vec![0.5, 0.25, 0.25]);
        assert_eq!(
            probabilistic_target(&original, 1.0).unwrap().probs(),
            original.probs()
        );
        let uniform = probabilistic_target(&original, 0.0).unwrap();
        for &p in uniform.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        // 0.6 * original + 0.4 / 3 by hand: (13/30, 17/60, 17/60).
        let mixed = probabilistic_target(&original, 0.6).unwrap();
        assert!((mixed.probs()[0] - 13.0 / 30.0).abs() < 1e-12);
        assert!((mixed.probs()[1] - 17.0 / 60.0).abs() < 1e-12);
        assert!((mixed.probs()[2] - 17.0 / 60.0).abs() < 1e-12);
        assert!(matches!(
            probabilistic_target(&original, 1.5),
            Err(SamplingError::BadLambda(_))
        ));
    }

    proptest! {
        #[test]
        fn target_stays_on_simplex_and_monotone_in_lambda(
            weights in prop::collection::vec(0.01f64..1.0, 2..8),
            l1 in 0.0f64..=1.0,
            l2 in 0.0f64..=1.0,
        ) {
            let total: f64 = weights.iter().sum();
            let original = Distribution::new(weights.iter().map(|w| w / total).collect());
            let t1 = probabilistic_target(&original, l1).unwrap();
            prop_assert!((t1.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // Larger lambda sits closer to the original distribution.
            let (hi, lo) = if l1 >= l2 { (l1, l2) } else { (l2, l1) };
            let near = probabilistic_target(&original, hi).unwrap();
            let far = probabilistic_target(&original, lo).unwrap();
            prop_assert!(near.l1_distance(&original) <= far.l1_distance(&original) + 1e-12);
        }
    }

    #[test]
    fn sampler_single_class_and_unreachable() {
        let out = probabilistic_sampler(&[0, 0, 0], 1, 1.0, 9, 50).unwrap();
        assert!(out.iter().all(|&i| i < 3));

        // With lambda = 1 a class absent from the data has target 0:
        // valid, it just never gets drawn.
        assert!(ProbabilisticSampler::new(&[0, 0], 2, 1.0, 9).is_ok());
        // Any lambda < 1 gives the absent class positive target mass.
        assert!(matches!(
            ProbabilisticSampler::new(&[0, 0], 2, 0.5, 9),
            Err(SamplingError::UnreachableClass { class: 1 })
        ));
    }

    #[test]
    fn sampler_converges_to_uniform_at_lambda_zero() {
        let labels: Vec<usize> = std::iter::repeat_n(0, 90)
            .chain(std::iter::repeat_n(1, 10))
            .collect();
        let draws = probabilistic_sampler(&labels, 2, 0.0, 1234, 100_000).unwrap();
        let drawn: Vec<usize> = draws.iter().map(|&i| labels[i]).collect();
        let empirical = class_distribution(&drawn, 2).unwrap();
        assert!(empirical.l1_distance(&Distribution::uniform(2)) <= 0.02);
    }

    #[test]
    fn sampler_is_deterministic() {
        let labels = [0, 1, 1, 2, 2, 2];
        let a = probabilistic_sampler(&labels, 3, 0.6, 77, 500).unwrap();
        let b = probabilistic_sampler(&labels, 3, 0.6, 77, 500).unwrap();
        assert_eq!(a, b);
        let c = probabilistic_sampler(&labels, 3, 0.6, 78, 500).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn multitask_single_task_reduces_to_plain_sampler() {
        let labels = [0usize, 1, 1, 2, 0, 2, 2];
        let tuples: Vec<Vec<usize>> = labels.iter().map(|&l| vec![l]).collect();
        let mut multi = MultitaskProbabilisticSampler::new(&tuples, &[3], 0.6, 55, 100).unwrap();
        let single = probabilistic_sampler(&labels, 3, 0.6, 55, 200).unwrap();
        assert_eq!(multi.draw_n(200), single);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn multitask_marginals_converge_when_all_pairs_exist() {
        // Skewed 2x2 corpus with every pair present.
        let mut tuples = Vec::new();
        for (pair, count) in [([0, 0], 40), ([0, 1], 5), ([1, 0], 10), ([1, 1], 45)] {
            for _ in 0..count {
                tuples.push(pair.to_vec());
            }
        }
        let mut sampler =
            MultitaskProbabilisticSampler::new(&tuples, &[2, 2], 0.0, 2024, 100).unwrap();
        let draws = sampler.draw_n(100_000);
        for task in 0..2 {
            let marginal: Vec<usize> = draws.iter().map(|&i| tuples[i][task]).collect();
            let empirical = class_distribution(&marginal, 2).unwrap();
            assert!(
                empirical.l1_distance(&Distribution::uniform(2)) <= 0.02,
                "task {task} marginal off target"
            );
        }
    }

    #[test]
    fn multitask_fallback_picks_nearest_then_lexicographic() {
        // Only (0,0) and (1,1) exist; when (0,1) is drawn it is rejected
        // until max_rejects, then falls back to (0,0).
        let tuples = vec![vec![0, 0], vec![1, 1]];
        let mut sampler = MultitaskProbabilisticSampler::new(&tuples, &[2, 2], 0.0, 31, 3).unwrap();
        let draws = sampler.draw_n(2000);
        assert!(draws.iter().all(|&i| i < 2));
        // Both groups get hit despite half the tuple mass being absent.
        assert!(draws.contains(&0) && draws.contains(&1));

        let sampler = MultitaskProbabilisticSampler::new(&tuples, &[2, 2], 0.0, 31, 3).unwrap();
        assert_eq!(sampler.fallback_tuple(&[0, 1]), &vec![0, 0]);
        assert_eq!(sampler.fallback_tuple(&[1, 0]), &vec![0, 0]);
    }
}
