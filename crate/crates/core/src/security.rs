//! Shard-failure probabilities: the amplified malicious fraction in the
//! P-shard, the P-shard failure tail, the M-shard failure probability by
//! generating-function convolution, its union upper bound, minimum committee
//! sizes, and Monte Carlo and exact oracles.
//!
//! Large tails are evaluated in log space; `ln C(n, k)` comes from a table of
//! `ln k!` built by summation.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SEARCH_CAP: u64 = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum SecurityError {
    #[error("parameter out of domain: {0}")]
    Domain(String),
    #[error("no committee size up to {cap} reaches 2^-{lambda}")]
    Infeasible { cap: u64, lambda: u32 },
}

fn open_unit(name: &str, x: f64) -> Result<(), SecurityError> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(SecurityError::Domain(format!("{name} = {x} must lie in (0, 1)")))
    }
}

fn positive(name: &str, x: u64) -> Result<(), SecurityError> {
    if x >= 1 {
        Ok(())
    } else {
        Err(SecurityError::Domain(format!("{name} must be a positive integer")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecurityParams {
    /// Honest share of P-shard computing power.
    pub alpha: f64,
    /// System-wide malicious share.
    pub phi: f64,
    /// P-shard size.
    pub m: u64,
    /// Nodes per M-shard.
    pub theta: u64,
    pub shards: u64,
    pub lambda: u32,
}

impl SecurityParams {
    pub fn validate(&self) -> Result<(), SecurityError> {
        open_unit("alpha", self.alpha)?;
        open_unit("phi", self.phi)?;
        positive("m", self.m)?;
        positive("theta", self.theta)?;
        positive("S", self.shards)?;
        positive("lambda", self.lambda as u64)
    }

    /// P-shard share of all nodes, `m / (m + ϑS)`.
    pub fn kappa(&self) -> f64 {
        self.m as f64 / (self.m + self.theta * self.shards) as f64
    }
}

/// `υ = φ / (φ + α(1−φ))`: the malicious fraction in the P-shard when
/// malicious nodes all join it. `alpha` may be 1 (no amplification).
pub fn amplified_malicious_fraction(phi: f64, alpha: f64) -> Result<f64, SecurityError> {
    open_unit("phi", phi)?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(SecurityError::Domain(format!("alpha = {alpha} must lie in (0, 1]")));
    }
    Ok(phi / (phi + alpha * (1.0 - phi)))
}

pub fn amplified_malicious_fraction_exact(phi: &BigRational, alpha: &BigRational) -> BigRational {
    let one = BigRational::one();
    phi / (phi + alpha * (&one - phi))
}

/// `ln k!` for `k = 0..=n`.
fn ln_factorials(n: u64) -> Vec<f64> {
    let mut t = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0f64;
    t.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        t.push(acc);
    }
    t
}

fn ln_choose(lf: &[f64], n: u64, k: u64) -> f64 {
    lf[n as usize] - lf[k as usize] - lf[(n - k) as usize]
}

fn log_sum_exp(terms: impl IntoIterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.into_iter().collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// `P(Bin(n, p) ≥ k)`, with `p` in `[0, 1]`.
pub fn binomial_tail(n: u64, p: f64, k: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n || p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let lf = ln_factorials(n);
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    log_sum_exp((k..=n).map(|i| ln_choose(&lf, n, i) + i as f64 * lp + (n - i) as f64 * lq))
        .exp()
        .min(1.0)
}

/// Largest number of faulty members a committee of `n` tolerates.
pub fn fault_threshold(n: u64) -> u64 {
    (n - 1) / 3
}

/// P̂: probability that more than `⌊(m−1)/3⌋` of `m` P-shard members are
/// malicious.
pub fn pshard_failure_prob(m: u64, upsilon: f64) -> Result<f64, SecurityError> {
    positive("m", m)?;
    if !(0.0..1.0).contains(&upsilon) {
        return Err(SecurityError::Domain(format!("upsilon = {upsilon} must lie in [0, 1)")));
    }
    Ok(binomial_tail(m, upsilon, fault_threshold(m) + 1))
}

fn big_choose(n: u64, k: u64) -> BigInt {
    let mut c = BigInt::one();
    for i in 0..k {
        c = c * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    c
}

fn big_pow(x: &BigRational, e: u64) -> BigRational {
    num_traits::pow(x.clone(), e as usize)
}

/// Exact P̂ over rationals.
pub fn pshard_failure_prob_exact(m: u64, upsilon: &BigRational) -> BigRational {
    let one = BigRational::one();
    let q = &one - upsilon;
    (fault_threshold(m) + 1..=m)
        .map(|i| BigRational::from_integer(big_choose(m, i)) * big_pow(upsilon, i) * big_pow(&q, m - i))
        .fold(BigRational::zero(), |a, b| a + b)
}

/// Log of the probability that a single shard of `ϑ` nodes holds exactly
/// `j ≤ β` malicious members, for each `j`.
/// `ln P(Bin(ϑ, φ) = j)` for every `j` in `0..=ϑ`.
fn ln_shard_terms(theta: u64, phi: f64) -> Vec<f64> {
    let lf = ln_factorials(theta);
    let (lp, lq) = (phi.ln(), (-phi).ln_1p());
    (0..=theta)
        .map(|j| ln_choose(&lf, theta, j) + j as f64 * lp + (theta - j) as f64 * lq)
        .collect()
}

/// P̄: probability that at least one of `S` shards of `ϑ` nodes holds more
/// than `⌊(ϑ−1)/3⌋` malicious nodes, each node malicious with probability φ.
/// The safe mass `Σ_N A_N φ^N (1−φ)^{ϑS−N}` is the `S`-fold convolution of
/// the per-shard safe distribution, where `A_N` counts placements of `N`
/// malicious nodes with at most β in every shard. Failure mass is summed as
/// "shards before `i` safe, shard `i` unsafe" over `i`, so every term is
/// positive and tiny probabilities keep their relative precision.
pub fn mshard_failure_prob(theta: u64, shards: u64, phi: f64) -> Result<f64, SecurityError> {
    positive("theta", theta)?;
    positive("S", shards)?;
    if !(0.0..1.0).contains(&phi) {
        return Err(SecurityError::Domain(format!("phi = {phi} must lie in [0, 1)")));
    }
    if phi == 0.0 {
        return Ok(0.0);
    }
    let terms = ln_shard_terms(theta, phi);
    let beta = fault_threshold(theta) as usize;
    let (safe, unsafe_) = terms.split_at(beta + 1);
    let ln_unsafe = log_sum_exp(unsafe_.iter().copied());
    let mut acc = vec![0.0f64];
    let mut ln_fail = Vec::with_capacity(shards as usize);
    for _ in 0..shards {
        // The safe mass is at most one; capping it keeps P̄ under the union
        // bound even where the two agree to the last bit.
        ln_fail.push(log_sum_exp(acc.iter().copied()).min(0.0) + ln_unsafe);
        let mut next = vec![f64::NEG_INFINITY; acc.len() + safe.len() - 1];
        for (n, slot) in next.iter_mut().enumerate() {
            let lo = n.saturating_sub(acc.len() - 1);
            let hi = n.min(safe.len() - 1);
            *slot = log_sum_exp((lo..=hi).map(|j| safe[j] + acc[n - j]));
        }
        acc = next;
    }
    Ok(log_sum_exp(ln_fail).exp().clamp(0.0, 1.0))
}

/// Exact P̄ over rationals, by the same coefficient extraction.
pub fn mshard_failure_prob_exact(theta: u64, shards: u64, phi: &BigRational) -> BigRational {
    let beta = fault_threshold(theta);
    let one = BigRational::one();
    let q = &one - phi;
    let base: Vec<BigRational> = (0..=beta)
        .map(|j| BigRational::from_integer(big_choose(theta, j)) * big_pow(phi, j) * big_pow(&q, theta - j))
        .collect();
    let mut acc = vec![one.clone()];
    for _ in 0..shards {
        let mut next = vec![BigRational::zero(); acc.len() + base.len() - 1];
        for (i, a) in acc.iter().enumerate() {
            for (j, b) in base.iter().enumerate() {
                next[i + j] += a * b;
            }
        }
        acc = next;
    }
    one - acc.into_iter().fold(BigRational::zero(), |a, b| a + b)
}

/// Brute force over all `2^{ϑS}` malicious/honest assignments of a fixed
/// shard layout, each weighted by `φ^N (1−φ)^{ϑS−N}`.
pub fn mshard_failure_exhaustive(theta: u64, shards: u64, phi: f64) -> f64 {
    let total = theta * shards;
    assert!(total <= 24, "exhaustive enumeration limited to 24 nodes");
    let beta = fault_threshold(theta);
    let shard_mask = (1u64 << theta) - 1;
    let mut fail = 0.0;
    for assignment in 0u64..(1 << total) {
        let failed = (0..shards).any(|s| ((assignment >> (s * theta)) & shard_mask).count_ones() as u64 > beta);
        if failed {
            let n = assignment.count_ones() as i32;
            fail += phi.powi(n) * (1.0 - phi).powi(total as i32 - n);
        }
    }
    fail
}

/// Union bound `S · P(Bin(ϑ, φ) > β)`.
pub fn mshard_failure_upper_bound(theta: u64, shards: u64, phi: f64) -> Result<f64, SecurityError> {
    positive("theta", theta)?;
    positive("S", shards)?;
    if !(0.0..1.0).contains(&phi) {
        return Err(SecurityError::Domain(format!("phi = {phi} must lie in [0, 1)")));
    }
    if phi == 0.0 {
        return Ok(0.0);
    }
    let terms = ln_shard_terms(theta, phi);
    let ln_tail = log_sum_exp(terms[fault_threshold(theta) as usize + 1..].iter().copied());
    Ok((ln_tail + (shards as f64).ln()).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CommitteeTarget {
    Pshard { upsilon: f64 },
    Mshard { shards: u64, phi: f64 },
}

/// Smallest committee size whose failure probability is at most `2^-λ`,
/// scanning sizes upward to `cap`.
pub fn min_committee_size(target: CommitteeTarget, lambda: u32, cap: u64) -> Result<u64, SecurityError> {
    let goal = (-(lambda as f64)).exp2();
    let infeasible = SecurityError::Infeasible { cap, lambda };
    match target {
        CommitteeTarget::Pshard { upsilon } => {
            if upsilon >= 1.0 / 3.0 {
                return Err(infeasible);
            }
            (1..=cap)
                .find(|&m| pshard_failure_prob(m, upsilon).is_ok_and(|p| p <= goal))
                .ok_or(infeasible)
        }
        CommitteeTarget::Mshard { shards, phi } => {
            if phi >= 1.0 / 3.0 {
                return Err(infeasible);
            }
            // Shards fail independently, so P̄ = 1 − (1 − tail)^S; this closed
            // form keeps the scan linear in ϑ.
            (1..=cap)
                .find(|&theta| {
                    let tail = binomial_tail(theta, phi, fault_threshold(theta) + 1);
                    -(shards as f64 * (-tail).ln_1p()).exp_m1() <= goal
                })
                .ok_or(infeasible)
        }
    }
}

/// φ at which P̄(ϑ, S, φ) reaches `2^-λ`, by bisection on `(0, 1/3)`.
pub fn mshard_tolerance(theta: u64, shards: u64, lambda: u32) -> Result<f64, SecurityError> {
    let goal = (-(lambda as f64)).exp2();
    let (mut lo, mut hi) = (1e-6, 1.0 / 3.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mshard_failure_prob(theta, shards, mid)? > goal {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FailureKind {
    Pshard { m: u64, upsilon: f64 },
    Mshard { theta: u64, shards: u64, phi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub trials: u64,
}

impl McEstimate {
    fn from_hits(hits: u64, trials: u64) -> Self {
        let p = hits as f64 / trials as f64;
        McEstimate {
            estimate: p,
            std_error: (p * (1.0 - p) / trials as f64).sqrt(),
            trials,
        }
    }

    /// Whether `value` lies within `k` standard errors. A zero standard
    /// error (no or all hits) is widened to one trial's worth.
    pub fn agrees(&self, value: f64, k: f64) -> bool {
        let se = self.std_error.max(1.0 / self.trials as f64);
        (self.estimate - value).abs() <= k * se
    }
}

/// Monte Carlo oracle. P-shard: draw the malicious member count. M-shard:
/// mark each of `ϑS` nodes malicious with probability φ, shuffle them into
/// shards, and check every shard's threshold.
pub fn monte_carlo_failure(kind: FailureKind, trials: u64, seed: u64) -> Result<McEstimate, SecurityError> {
    positive("trials", trials)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hits = match kind {
        FailureKind::Pshard { m, upsilon } => {
            positive("m", m)?;
            if !(0.0..1.0).contains(&upsilon) {
                return Err(SecurityError::Domain(format!("upsilon = {upsilon} must lie in [0, 1)")));
            }
            let bin = Binomial::new(m, upsilon).map_err(|e| SecurityError::Domain(e.to_string()))?;
            let limit = fault_threshold(m);
            (0..trials).filter(|_| bin.sample(&mut rng) > limit).count() as u64
        }
        FailureKind::Mshard { theta, shards, phi } => {
            positive("theta", theta)?;
            positive("S", shards)?;
            let limit = fault_threshold(theta);
            let mut nodes = vec![false; (theta * shards) as usize];
            (0..trials)
                .filter(|_| {
                    for n in nodes.iter_mut() {
                        *n = rng.random_bool(phi);
                    }
                    nodes.shuffle(&mut rng);
                    nodes
                        .chunks(theta as usize)
                        .any(|c| c.iter().filter(|&&b| b).count() as u64 > limit)
                })
                .count() as u64
        }
    };
    Ok(McEstimate::from_hits(hits, trials))
}

/// Mean and standard error of the per-shard malicious fraction under random
/// assignment of `ϑS` nodes of which `round(φϑS)` are malicious.
pub fn monte_carlo_shard_fraction(theta: u64, shards: u64, phi: f64, trials: u64, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = (theta * shards) as usize;
    let bad = (phi * total as f64).round() as usize;
    let mut nodes: Vec<bool> = (0..total).map(|i| i < bad).collect();
    let mut samples = Vec::with_capacity(trials as usize);
    for _ in 0..trials {
        nodes.shuffle(&mut rng);
        let first = nodes[..theta as usize].iter().filter(|&&b| b).count();
        samples.push(first as f64 / theta as f64);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

pub const PARAM_SWEEP_COLUMNS: [&str; 8] =
    ["kind", "size", "shards", "fraction", "probability", "bound", "mc_estimate", "mc_se"];

/// One evaluated point of a failure-probability sweep. For the P-shard,
/// `size` is `m`, `fraction` is υ and `bound` repeats the exact tail; for
/// M-shards they are ϑ, φ and the union bound. Monte Carlo fields are empty
/// when no trials were requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSweepRow {
    pub kind: String,
    pub size: u64,
    pub shards: u64,
    pub fraction: f64,
    pub probability: f64,
    pub bound: f64,
    pub mc_estimate: Option<f64>,
    pub mc_se: Option<f64>,
}

pub fn evaluate_point(kind: FailureKind, mc_trials: u64, seed: u64) -> Result<ParamSweepRow, SecurityError> {
    let (name, size, shards, fraction, probability, bound) = match kind {
        FailureKind::Pshard { m, upsilon } => {
            let p = pshard_failure_prob(m, upsilon)?;
            ("pshard", m, 1, upsilon, p, p)
        }
        FailureKind::Mshard { theta, shards, phi } => (
            "mshard",
            theta,
            shards,
            phi,
            mshard_failure_prob(theta, shards, phi)?,
            mshard_failure_upper_bound(theta, shards, phi)?,
        ),
    };
    let mc = if mc_trials > 0 {
        Some(monte_carlo_failure(kind, mc_trials, seed)?)
    } else {
        None
    };
    Ok(ParamSweepRow {
        kind: name.to_string(),
        size,
        shards,
        fraction,
        probability,
        bound,
        mc_estimate: mc.map(|e| e.estimate),
        mc_se: mc.map(|e| e.std_error),
    })
}

pub fn write_param_sweep<W: std::io::Write>(writer: W, rows: &[ParamSweepRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PARAM_SWEEP_COLUMNS)?;
    for r in rows {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
        w.write_record([
            r.kind.clone(),
            r.size.to_string(),
            r.shards.to_string(),
            r.fraction.to_string(),
            format!("{:e}", r.probability),
            format!("{:e}", r.bound),
            opt(r.mc_estimate),
            opt(r.mc_se),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::ToPrimitive;

    fn rat(num: i64, den: i64) -> BigRational {
        BigRational::new(num.into(), den.into())
    }

    #[test]
    fn upsilon_values() {
        assert!((amplified_malicious_fraction(0.2, 0.9).unwrap() - 0.2174).abs() < 5e-4);
        assert!((amplified_malicious_fraction(0.2, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-3);
        assert_eq!(amplified_malicious_fraction(0.3, 1.0).unwrap(), 0.3);
        assert!(amplified_malicious_fraction(0.0, 0.5).is_err());
        assert!(amplified_malicious_fraction(0.2, 0.0).is_err());
        let exact = amplified_malicious_fraction_exact(&rat(1, 5), &rat(9, 10));
        assert_eq!(exact, rat(5, 23));
    }

    #[test]
    fn single_member_committee() {
        assert!((pshard_failure_prob(1, 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(pshard_failure_prob(4, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn pshard_matches_exact_rational() {
        for (m, num, den) in [(7u64, 1i64, 4i64), (30, 1, 5), (61, 3, 10)] {
            let exact = pshard_failure_prob_exact(m, &rat(num, den)).to_f64().unwrap();
            let approx = pshard_failure_prob(m, num as f64 / den as f64).unwrap();
            assert!((exact - approx).abs() <= 1e-12 * exact.max(1e-300) + 1e-15, "m={m}");
        }
    }

    #[test]
    fn pshard_boundary_at_250() {
        let p = pshard_failure_prob(250, 0.21).unwrap();
        assert!(p <= (-18f64).exp2(), "{p}");
        assert!(min_committee_size(CommitteeTarget::Pshard { upsilon: 0.21 }, 18, DEFAULT_SEARCH_CAP).unwrap() <= 250);
    }

    #[test]
    fn mshard_convolution_matches_exhaustive_and_exact() {
        for theta in 1..=5 {
            for shards in 1..=3 {
                for phi in [0.1, 0.25, 0.4] {
                    let conv = mshard_failure_prob(theta, shards, phi).unwrap();
                    let brute = mshard_failure_exhaustive(theta, shards, phi);
                    assert!((conv - brute).abs() <= 1e-12, "ϑ={theta} S={shards} φ={phi}: {conv} vs {brute}");
                }
            }
        }
        let exact = mshard_failure_prob_exact(4, 3, &rat(1, 4)).to_f64().unwrap();
        assert!((exact - mshard_failure_prob(4, 3, 0.25).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn mshard_matches_independent_product() {
        for (theta, shards, phi) in [(40u64, 5u64, 0.2), (250, 16, 0.19), (10, 4, 0.2), (250, 16, 0.05)] {
            let tail = binomial_tail(theta, phi, fault_threshold(theta) + 1);
            let product = -(shards as f64 * (-tail).ln_1p()).exp_m1();
            let conv = mshard_failure_prob(theta, shards, phi).unwrap();
            assert!((conv - product).abs() <= 1e-9 * product, "{conv} vs {product}");
        }
    }

    #[test]
    fn union_bound_dominates_and_is_exact_for_one_shard() {
        let b = mshard_failure_upper_bound(4, 3, 0.25).unwrap();
        assert!(b >= mshard_failure_prob(4, 3, 0.25).unwrap());
        let single = mshard_failure_prob(9, 1, 0.3).unwrap();
        assert!((mshard_failure_upper_bound(9, 1, 0.3).unwrap() - single).abs() < 1e-12);
    }

    #[test]
    fn limits_and_monotonicity() {
        assert!(mshard_failure_prob(3, 1, 1e-9).unwrap() < 1e-8);
        let mut prev = 0.0;
        for i in 1..30 {
            let p = mshard_failure_prob(30, 4, i as f64 / 100.0).unwrap();
            assert!(p >= prev);
            prev = p;
        }
        let mut prev = 0.0;
        for i in 1..30 {
            let p = pshard_failure_prob(100, i as f64 / 100.0).unwrap();
            assert!(p >= prev);
            prev = p;
        }
    }

    #[test]
    fn infeasible_committee() {
        assert_eq!(
            min_committee_size(CommitteeTarget::Pshard { upsilon: 0.34 }, 10, 100),
            Err(SecurityError::Infeasible { cap: 100, lambda: 10 })
        );
        let m = min_committee_size(CommitteeTarget::Pshard { upsilon: 0.01 }, 1, 100).unwrap();
        assert!(pshard_failure_prob(m, 0.01).unwrap() <= 0.5);
        if m > 1 {
            assert!(pshard_failure_prob(m - 1, 0.01).unwrap() > 0.5);
        }
    }

    #[test]
    fn monte_carlo_agrees_with_closed_forms() {
        let est = monte_carlo_failure(FailureKind::Pshard { m: 30, upsilon: 0.25 }, 100_000, 1).unwrap();
        assert!(est.agrees(pshard_failure_prob(30, 0.25).unwrap(), 3.0), "{est:?}");
        let est = monte_carlo_failure(
            FailureKind::Mshard {
                theta: 10,
                shards: 4,
                phi: 0.2,
            },
            50_000,
            2,
        )
        .unwrap();
        assert!(est.agrees(mshard_failure_prob(10, 4, 0.2).unwrap(), 3.0), "{est:?}");
        let zero = monte_carlo_failure(FailureKind::Pshard { m: 10, upsilon: 0.0 }, 1000, 3).unwrap();
        assert_eq!(zero.estimate, 0.0);
    }

    #[test]
    fn shard_fraction_concentrates_at_phi() {
        let (mean, se) = monte_carlo_shard_fraction(20, 10, 0.2, 20_000, 5);
        assert!((mean - 0.2).abs() <= 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn sweep_csv_has_fixed_columns() {
        let rows = vec![
            evaluate_point(FailureKind::Pshard { m: 40, upsilon: 0.2 }, 0, 0).unwrap(),
            evaluate_point(
                FailureKind::Mshard {
                    theta: 8,
                    shards: 2,
                    phi: 0.2,
                },
                100,
                0,
            )
            .unwrap(),
        ];
        let mut buf = Vec::new();
        write_param_sweep(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), PARAM_SWEEP_COLUMNS.join(","));
        assert!(lines.next().unwrap().ends_with(",,"));
        assert_eq!(lines.count(), 1);
    }

    #[test]
    fn mshard_tolerance_near_twenty_percent() {
        let phi = mshard_tolerance(250, 16, 18).unwrap();
        assert!((0.17..=0.23).contains(&phi), "{phi}");
    }

    #[test]
    fn kappa_is_derived() {
        let p = SecurityParams {
            alpha: 0.9,
            phi: 0.2,
            m: 250,
            theta: 250,
            shards: 16,
            lambda: 18,
        };
        p.validate().unwrap();
        assert!((p.kappa() - 250.0 / 4250.0).abs() < 1e-15);
    }
}
