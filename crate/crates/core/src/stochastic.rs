//! Random-variate generation for arrivals and service times under a
//! reproducible seeded RNG contract.
//!
//! Every replication owns ChaCha8 streams derived from (master seed,
//! stream id), so runs are bit-reproducible across platforms. Service
//! times are integer slots >= 1; arrivals are truncated-Poisson counts of
//! i.i.d. types drawn from a popularity distribution.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, LogNormal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{TaskType, TypeCatalog, TypeId};

/// The portable 64-bit generator used everywhere. Named in configs as
/// "chacha8".
pub type SimRng = ChaCha8Rng;

/// Stream ids carving one master seed into independent substreams.
pub const ARRIVAL_STREAM: u64 = 1;
pub const SERVICE_STREAM: u64 = 2;

/// RNG for one replication: seeded by the master seed, split by stream id.
pub fn replication_rng(master_seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Error, PartialEq)]
pub enum StochasticError {
    #[error("service means must be strictly increasing, got {0:?}")]
    MeansNotIncreasing(Vec<f64>),
    #[error("service means must be positive and finite, got {0:?}")]
    MeansNotPositive(Vec<f64>),
    #[error("geometric service needs mean >= 1 slot, got {0}")]
    GeometricMeanBelowOne(f64),
    #[error("popularity weights must sum to 1, got {0}")]
    BadPopularity(f64),
    #[error("arrival rate {rate} must be finite, nonnegative and at most the cap {cap}")]
    BadArrivalRate { rate: f64, cap: u64 },
    #[error("arrival cap must be positive")]
    ZeroCap,
    #[error("popularity has {weights} weights for {types} types")]
    PopularityMismatch { weights: usize, types: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceFamily {
    Geometric,
    Lognormal,
}

#[derive(Debug, Clone)]
enum LevelSampler {
    /// Geometric on support {1, 2, ...} with the given success probability.
    Geometric(Geometric),
    /// Service of exactly one slot (geometric with p = 1).
    Unit,
    /// Continuous log-normal, rounded up to the next slot.
    Lognormal(LogNormal<f64>),
}

/// Per-level service-time model. Level n draws from the family parameterized
/// by `configured_means[n - 1]`; `means[n - 1]` is the actual expectation of
/// the integer-slot samples (1/alpha_n), which the ceiling discretization
/// pushes above the parameter for the log-normal family.
#[derive(Debug, Clone)]
pub struct ServiceModel {
    family: ServiceFamily,
    configured_means: Vec<f64>,
    effective_means: Vec<f64>,
    samplers: Vec<LevelSampler>,
}

/// Parameters of the underlying normal for a log-normal with standard
/// deviation equal to its mean: sigma^2 = ln 2, location = ln(mean) - ln 2 / 2.
pub fn lognormal_parameters(mean: f64) -> (f64, f64) {
    let sigma2 = std::f64::consts::LN_2;
    (mean.ln() - sigma2 / 2.0, sigma2.sqrt())
}

/// E[ceil(X)] for X log-normal with mean = std = `mean`, by summing the
/// survival function: E[ceil X] = sum_{k >= 0} P(X > k).
pub fn lognormal_discretized_mean(mean: f64) -> f64 {
    let (loc, sigma) = lognormal_parameters(mean);
    let survival = |k: f64| {
        let z = (k.ln() - loc) / (sigma * std::f64::consts::SQRT_2);
        0.5 * libm::erfc(z)
    };
    let mut total = 1.0; // k = 0: P(X > 0) = 1
    for k in 1..1_000_000 {
        let tail = survival(k as f64);
        total += tail;
        if tail < 1e-13 {
            break;
        }
    }
    total
}

impl ServiceModel {
    pub fn new(family: ServiceFamily, means: Vec<f64>) -> Result<Self, StochasticError> {
        if means.is_empty() || means.iter().any(|m| !m.is_finite() || *m <= 0.0) {
            return Err(StochasticError::MeansNotPositive(means));
        }
        if means.windows(2).any(|w| w[0] >= w[1]) {
            return Err(StochasticError::MeansNotIncreasing(means));
        }
        let mut samplers = Vec::with_capacity(means.len());
        let mut effective = Vec::with_capacity(means.len());
        for &mu in &means {
            samplers.push(match family {
                ServiceFamily::Geometric => {
                    if mu < 1.0 {
                        return Err(StochasticError::GeometricMeanBelowOne(mu));
                    }
                    effective.push(mu);
                    if mu == 1.0 {
                        LevelSampler::Unit
                    } else {
                        LevelSampler::Geometric(
                            Geometric::new(1.0 / mu).expect("probability in (0, 1]"),
                        )
                    }
                }
                ServiceFamily::Lognormal => {
                    effective.push(lognormal_discretized_mean(mu));
                    let (loc, sigma) = lognormal_parameters(mu);
                    LevelSampler::Lognormal(
                        LogNormal::new(loc, sigma).expect("finite parameters"),
                    )
                }
            });
        }
        // Scaling preserves order, so discretized means inherit strictness.
        debug_assert!(effective.windows(2).all(|w| w[0] < w[1]));
        Ok(Self { family, configured_means: means, effective_means: effective, samplers })
    }

    pub fn family(&self) -> ServiceFamily {
        self.family
    }

    /// Number of locality levels covered.
    pub fn levels(&self) -> usize {
        self.configured_means.len()
    }

    /// The family parameters as configured.
    pub fn configured_means(&self) -> &[f64] {
        &self.configured_means
    }

    /// Actual per-level means of the integer-slot samples, 1/alpha_n. These
    /// drive workloads, pseudo quantities and the capacity LP.
    pub fn means(&self) -> &[f64] {
        &self.effective_means
    }

    /// Mean service time at level n (1-based), i.e. 1/alpha_n.
    pub fn mean(&self, n: usize) -> f64 {
        self.effective_means[n - 1]
    }

    /// One service duration at level n, in whole slots >= 1.
    pub fn sample_service(&self, n: usize, rng: &mut SimRng) -> u64 {
        match &self.samplers[n - 1] {
            LevelSampler::Unit => 1,
            LevelSampler::Geometric(g) => g.sample(rng) + 1,
            LevelSampler::Lognormal(l) => (l.sample(rng).ceil() as u64).max(1),
        }
    }
}

/// Popularity shape over the task types of a catalog.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Popularity {
    Uniform,
    /// p(rank) proportional to rank^-exponent over the catalog order.
    Zipf { exponent: f64 },
}

impl Popularity {
    pub fn weights(&self, count: usize) -> Vec<f64> {
        match *self {
            Popularity::Uniform => vec![1.0 / count as f64; count],
            Popularity::Zipf { exponent } => {
                let raw: Vec<f64> =
                    (1..=count).map(|rank| (rank as f64).powf(-exponent)).collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|w| w / total).collect()
            }
        }
    }
}

/// Bounded i.i.d. arrival generator: a Poisson count truncated at `cap` by
/// redraw, each task's type drawn independently from the popularity weights.
#[derive(Debug, Clone)]
pub struct ArrivalModel {
    total_rate: f64,
    cap: u64,
    probs: Vec<f64>,
    index: Option<WeightedIndex<f64>>,
    poisson: Option<Poisson<f64>>,
}

impl ArrivalModel {
    pub fn new(total_rate: f64, probs: Vec<f64>, cap: u64) -> Result<Self, StochasticError> {
        if cap == 0 {
            return Err(StochasticError::ZeroCap);
        }
        if !total_rate.is_finite() || total_rate < 0.0 || total_rate > cap as f64 {
            return Err(StochasticError::BadArrivalRate { rate: total_rate, cap });
        }
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(StochasticError::BadPopularity(sum));
        }
        let index = if total_rate > 0.0 {
            Some(WeightedIndex::new(&probs).expect("validated weights"))
        } else {
            None
        };
        let poisson = if total_rate > 0.0 {
            Some(Poisson::new(total_rate).expect("positive rate"))
        } else {
            None
        };
        Ok(Self { total_rate, cap, probs, index, poisson })
    }

    pub fn for_catalog(
        catalog: &TypeCatalog,
        popularity: &Popularity,
        total_rate: f64,
        cap: u64,
    ) -> Result<Self, StochasticError> {
        let probs = popularity.weights(catalog.len());
        if probs.len() != catalog.len() {
            return Err(StochasticError::PopularityMismatch {
                weights: probs.len(),
                types: catalog.len(),
            });
        }
        Self::new(total_rate, probs, cap)
    }

    pub fn total_rate(&self) -> f64 {
        self.total_rate
    }

    pub fn cap(&self) -> u64 {
        self.cap
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// The multiset of types arriving in one slot.
    pub fn sample_arrivals(&self, rng: &mut SimRng) -> Vec<TypeId> {
        let (Some(poisson), Some(index)) = (&self.poisson, &self.index) else {
            return Vec::new();
        };
        let count = loop {
            let c = poisson.sample(rng);
            if c <= self.cap as f64 {
                break c as u64;
            }
        };
        (0..count).map(|_| index.sample(rng)).collect()
    }

    /// Per-type rates seen by the capacity LP: the truncated-Poisson mean
    /// spread over the popularity weights, so the vector sums to the true
    /// expected arrivals per slot.
    pub fn effective_rate_vector(&self, catalog: &TypeCatalog) -> RateVector {
        let adjusted = truncated_poisson_mean(self.total_rate, self.cap);
        let entries = catalog
            .types()
            .iter()
            .zip(&self.probs)
            .map(|(ty, p)| (ty.clone(), adjusted * p))
            .collect();
        RateVector { entries }
    }
}

/// E[X | X <= cap] for X ~ Poisson(rate); the mean of the redraw-truncated
/// arrival count.
pub fn truncated_poisson_mean(rate: f64, cap: u64) -> f64 {
    if rate == 0.0 {
        return 0.0;
    }
    let mut pmf = (-rate).exp();
    let mut mass = pmf;
    let mut mean = 0.0;
    for k in 1..=cap {
        pmf *= rate / k as f64;
        mass += pmf;
        mean += k as f64 * pmf;
    }
    mean / mass
}

/// Arrival rate per task type, tasks per slot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RateVector {
    entries: BTreeMap<TaskType, f64>,
}

impl RateVector {
    pub fn new(entries: BTreeMap<TaskType, f64>) -> Self {
        Self { entries }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (TaskType, f64)>) -> Self {
        Self { entries: pairs.into_iter().collect() }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TaskType, f64)> {
        self.entries.iter().map(|(ty, &rate)| (ty, rate))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, ty: &TaskType) -> f64 {
        self.entries.get(ty).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.entries.values().sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            entries: self.entries.iter().map(|(ty, r)| (ty.clone(), r * factor)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::ClusterTopology;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn geometric_mean_two() {
        let model = ServiceModel::new(ServiceFamily::Geometric, vec![2.0]).unwrap();
        let mut rng = replication_rng(7, SERVICE_STREAM);
        let n = 1_000_000u64;
        let sum: u64 = (0..n).map(|_| model.sample_service(1, &mut rng)).sum();
        let mean = sum as f64 / n as f64;
        assert!((mean - 2.0).abs() < 0.01, "geometric mean {mean}");
    }

    #[test]
    fn lognormal_moment_matching() {
        let (loc, sigma) = lognormal_parameters(4.0);
        assert_relative_eq!(sigma * sigma, 0.693_147_180_559_945_3, epsilon = 1e-12);
        assert_relative_eq!(loc, 4.0f64.ln() - 0.693_147_180_559_945_3 / 2.0, epsilon = 1e-12);
        assert_relative_eq!(loc, 1.039_720_770_839_917_9, epsilon = 1e-9);
    }

    #[test]
    fn samples_are_at_least_one_slot() {
        for family in [ServiceFamily::Geometric, ServiceFamily::Lognormal] {
            let model = ServiceModel::new(family, vec![1.0, 1.25, 4.0]).unwrap();
            let mut rng = replication_rng(3, SERVICE_STREAM);
            for _ in 0..20_000 {
                for n in 1..=3 {
                    assert!(model.sample_service(n, &mut rng) >= 1);
                }
            }
        }
    }

    /// Quadrature oracle for E[ceil(X)], X log-normal with mean = std = mu:
    /// substitute X = exp(loc + sigma z) and integrate ceil against the
    /// standard normal density by midpoint rule. Independent of the
    /// library's survival-sum computation.
    fn discretized_lognormal_mean_oracle(mu: f64) -> f64 {
        let (loc, sigma) = lognormal_parameters(mu);
        let h = 1e-5;
        let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let steps = (18.0 / h) as u64;
        let mut total = 0.0;
        for i in 0..steps {
            let z = -9.0 + (i as f64 + 0.5) * h;
            let x = (loc + sigma * z).exp();
            total += x.ceil() * (-0.5 * z * z).exp() * norm * h;
        }
        total
    }

    #[test]
    fn effective_means_match_quadrature_oracle() {
        for mu in [1.0, 10.0 / 9.0, 5.0 / 3.0, 4.0] {
            let lib = lognormal_discretized_mean(mu);
            let oracle = discretized_lognormal_mean_oracle(mu);
            assert!((lib - oracle).abs() < 1e-3, "mu {mu}: lib {lib}, oracle {oracle}");
            assert!(lib > mu, "ceiling must inflate the mean (mu {mu} -> {lib})");
        }
        let geo = ServiceModel::new(ServiceFamily::Geometric, vec![1.0, 2.0]).unwrap();
        assert_eq!(geo.means(), geo.configured_means());
    }

    #[test]
    fn empirical_means_match_within_three_standard_errors() {
        let means = vec![1.0, 10.0 / 9.0, 5.0 / 3.0, 4.0];
        let draws = 100_000u64;
        for family in [ServiceFamily::Geometric, ServiceFamily::Lognormal] {
            let model = ServiceModel::new(family, means.clone()).unwrap();
            let mut rng = replication_rng(11, SERVICE_STREAM);
            let mut empirical = Vec::new();
            for n in 1..=4 {
                let samples: Vec<f64> =
                    (0..draws).map(|_| model.sample_service(n, &mut rng) as f64).collect();
                let mean = samples.iter().sum::<f64>() / draws as f64;
                let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
                    / (draws - 1) as f64;
                let se = (var / draws as f64).sqrt();
                let target = match family {
                    ServiceFamily::Geometric => means[n - 1],
                    ServiceFamily::Lognormal => discretized_lognormal_mean_oracle(means[n - 1]),
                };
                assert!(
                    (mean - target).abs() <= 3.0 * se.max(1e-12),
                    "{family:?} level {n}: mean {mean}, target {target}, se {se}"
                );
                // The model's own effective mean must sit on the same value.
                assert!((model.mean(n) - target).abs() < 1e-3);
                empirical.push(mean);
            }
            assert!(
                empirical.windows(2).all(|w| w[0] < w[1]),
                "{family:?} means not increasing: {empirical:?}"
            );
        }
    }

    #[test]
    fn geometric_mean_below_one_rejected() {
        let err = ServiceModel::new(ServiceFamily::Geometric, vec![0.5, 2.0]).unwrap_err();
        assert_eq!(err, StochasticError::GeometricMeanBelowOne(0.5));
    }

    #[test]
    fn means_must_increase() {
        assert!(ServiceModel::new(ServiceFamily::Lognormal, vec![2.0, 2.0]).is_err());
        assert!(ServiceModel::new(ServiceFamily::Lognormal, vec![2.0, 1.0]).is_err());
    }

    fn catalog(m: usize, d: usize) -> TypeCatalog {
        let topo = ClusterTopology::balanced(vec![m]).unwrap();
        TypeCatalog::all_types(&topo, d).unwrap()
    }

    #[test]
    fn zero_rate_is_always_empty() {
        let cat = catalog(4, 2);
        let model = ArrivalModel::for_catalog(&cat, &Popularity::Uniform, 0.0, 100).unwrap();
        let mut rng = replication_rng(5, ARRIVAL_STREAM);
        for _ in 0..1000 {
            assert!(model.sample_arrivals(&mut rng).is_empty());
        }
    }

    #[test]
    fn arrival_count_mean_and_zero_probability() {
        let cat = catalog(4, 2);
        let model = ArrivalModel::for_catalog(&cat, &Popularity::Uniform, 2.0, 100).unwrap();
        let mut rng = replication_rng(17, ARRIVAL_STREAM);
        let slots = 1_000_000u64;
        let mut total = 0u64;
        let mut zeros = 0u64;
        for _ in 0..slots {
            let n = model.sample_arrivals(&mut rng).len() as u64;
            assert!(n <= 100);
            total += n;
            if n == 0 {
                zeros += 1;
            }
        }
        let mean = total as f64 / slots as f64;
        assert!((mean - 2.0).abs() < 0.01, "arrival mean {mean}");
        // P(count = 0) = exp(-2)/Z; expect about 135k zeros per million.
        assert!(zeros > 100_000, "zero-arrival slots {zeros}");
    }

    #[test]
    fn effective_rates_uniform() {
        let cat = catalog(4, 3); // 4 types
        let model = ArrivalModel::for_catalog(&cat, &Popularity::Uniform, 2.0, 100).unwrap();
        let rates = model.effective_rate_vector(&cat);
        assert_eq!(rates.len(), 4);
        for (_, r) in rates.iter() {
            assert!((r - 0.5).abs() < 1e-6, "rate {r}");
        }
    }

    #[test]
    fn effective_rates_single_type() {
        let cat = catalog(3, 3);
        let model = ArrivalModel::for_catalog(&cat, &Popularity::Uniform, 1.5, 100).unwrap();
        let rates = model.effective_rate_vector(&cat);
        assert_eq!(rates.len(), 1);
        let adjusted = truncated_poisson_mean(1.5, 100);
        assert_relative_eq!(rates.total(), adjusted, epsilon = 1e-12);
        assert!((rates.total() - 1.5).abs() < 1e-6);
    }

    #[test]
    fn effective_rates_zipf_harmonic() {
        let cat = catalog(3, 2); // 3 types
        let model =
            ArrivalModel::for_catalog(&cat, &Popularity::Zipf { exponent: 1.0 }, 1.0, 100)
                .unwrap();
        let rates: Vec<f64> = model.effective_rate_vector(&cat).iter().map(|(_, r)| r).collect();
        let total: f64 = rates.iter().sum();
        assert_relative_eq!(rates[0] / total, 6.0 / 11.0, epsilon = 1e-12);
        assert_relative_eq!(rates[1] / total, 3.0 / 11.0, epsilon = 1e-12);
        assert_relative_eq!(rates[2] / total, 2.0 / 11.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_seeds_give_identical_streams() {
        let cat = catalog(4, 2);
        let model = ArrivalModel::for_catalog(&cat, &Popularity::Uniform, 3.0, 100).unwrap();
        let service = ServiceModel::new(ServiceFamily::Lognormal, vec![1.0, 2.0]).unwrap();
        let run = |seed: u64| {
            let mut a = replication_rng(seed, ARRIVAL_STREAM);
            let mut s = replication_rng(seed, SERVICE_STREAM);
            let arrivals: Vec<Vec<TypeId>> =
                (0..200).map(|_| model.sample_arrivals(&mut a)).collect();
            let services: Vec<u64> = (0..200).map(|_| service.sample_service(2, &mut s)).collect();
            (arrivals, services)
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    #[test]
    fn streams_are_independent_of_each_other() {
        let mut a = replication_rng(9, ARRIVAL_STREAM);
        let mut s = replication_rng(9, SERVICE_STREAM);
        let xs: Vec<u64> = (0..8).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..8).map(|_| s.random()).collect();
        assert_ne!(xs, ys);
    }
}
