//! Closed-form security arithmetic.
//!
//! Reuse-attack costs are exact big integers. Occupancy probabilities are
//! kept as natural logarithms so tail values far below `f64::MIN_POSITIVE`
//! stay representable.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::{Error, Result};

/// Load factor `n_ball / n_bin` of the default geometry.
pub const DEFAULT_LOAD: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistSource {
    Analytical,
    Empirical,
}

/// How `P_{N+1}` is obtained from the distribution up to `N`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecursionForm {
    /// Positive root of the full up/down balance, with the upper tail mass
    /// solved self-consistently.
    #[default]
    Balance,
    /// `P_N^2 / (2 (N+1)/rho * sum_{i<=N} (i/rho) P_i)`: the balance with
    /// the `P_{N+1}^2` and tail-mass terms dropped.
    Approximate,
}

/// Occupancy distribution `P_N`, stored as `ln P_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateDist {
    ln_p: Vec<f64>,
    pub source: DistSource,
    /// Index `N` of the second seed when the tail came from a recursion.
    pub seed_index: Option<usize>,
}

impl SteadyStateDist {
    pub fn from_probs(p: &[f64], source: DistSource) -> Self {
        Self {
            ln_p: p.iter().map(|&x| x.ln()).collect(),
            source,
            seed_index: None,
        }
    }

    pub fn from_ln(ln_p: Vec<f64>, source: DistSource) -> Self {
        Self {
            ln_p,
            source,
            seed_index: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ln_p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ln_p.is_empty()
    }

    /// `P_N`, zero beyond the stored range.
    pub fn prob(&self, n: usize) -> f64 {
        self.ln_p.get(n).map_or(0.0, |x| x.exp())
    }

    /// `ln P_N`, negative infinity beyond the stored range.
    pub fn ln_prob(&self, n: usize) -> f64 {
        self.ln_p.get(n).copied().unwrap_or(f64::NEG_INFINITY)
    }

    /// `log10 P_N`.
    pub fn log10_prob(&self, n: usize) -> f64 {
        self.ln_prob(n) / std::f64::consts::LN_10
    }

    pub fn probs(&self) -> Vec<f64> {
        self.ln_p.iter().map(|x| x.exp()).collect()
    }

    pub fn ln_probs(&self) -> &[f64] {
        &self.ln_p
    }

    /// `ln sum_{i >= n} P_i`.
    pub fn ln_tail(&self, n: usize) -> f64 {
        ln_sum(self.ln_p.iter().skip(n).copied())
    }

    /// `sum_{i <= n} (i / rho) P_i`.
    pub fn weighted_head(&self, n: usize, rho: f64) -> f64 {
        (0..=n.min(self.ln_p.len().saturating_sub(1)))
            .map(|i| i as f64 / rho * self.prob(i))
            .sum()
    }
}

fn ln_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn ln_sum(xs: impl Iterator<Item = f64>) -> f64 {
    xs.fold(f64::NEG_INFINITY, ln_add)
}

/// Expected attempts of a PHT reuse attack: `(2^i * 2^t * 2^2)^skews`.
pub fn reuse_attempts_pht_skews(i_bits: u32, t_bits: u32, skews: u32) -> BigUint {
    BigUint::one() << ((i_bits + t_bits + 2) * skews)
}

/// Three-skew PHT reuse attempts.
pub fn reuse_attempts_pht(i_bits: u32, t_bits: u32) -> BigUint {
    reuse_attempts_pht_skews(i_bits, t_bits, 3)
}

/// Expected attempts of a BTB reuse attack: `2^i * 2^t * 2^n`.
pub fn reuse_attempts_btb(i_bits: u32, t_bits: u32, n_bits: u32) -> BigUint {
    BigUint::one() << (i_bits + t_bits + n_bits)
}

pub fn big_to_f64(x: &BigUint) -> f64 {
    x.to_f64().unwrap_or(f64::INFINITY)
}

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Poisson probability that a bin holds `n` balls after `l` uniform throws
/// into `n_bin` bins.
pub fn poisson_occupancy(l: f64, n_bin: f64, n: u64) -> f64 {
    let lambda = l / n_bin;
    if lambda == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    (-lambda + n as f64 * lambda.ln() - ln_factorial(n)).exp()
}

/// Exact binomial probability of the same event.
pub fn binomial_occupancy(l: u64, n_bin: f64, n: u64) -> f64 {
    if n > l {
        return 0.0;
    }
    let p = 1.0 / n_bin;
    let ln_choose = ln_factorial(l) - ln_factorial(n) - ln_factorial(l - n);
    (ln_choose + n as f64 * p.ln() + (l - n) as f64 * (-p).ln_1p()).exp()
}

/// Expected number of bins holding `w + 1` balls after `l` throws.
pub fn expected_overflowing_bins(l: f64, n_bin: f64, w: u64) -> f64 {
    n_bin * poisson_occupancy(l, n_bin, w + 1)
}

/// Solve `n_bin * Poisson(l / n_bin, w + 1) = expected_de` for `l` on the
/// increasing branch `lambda < w + 1`.
pub fn solve_first_de_accesses(n_bin: f64, w: u64, expected_de: f64) -> Result<f64> {
    if !(n_bin >= 1.0) || !(expected_de > 0.0) {
        return Err(Error::Config("n_bin >= 1 and expected_de > 0 required".into()));
    }
    let f = |lambda: f64| expected_overflowing_bins(lambda * n_bin, n_bin, w) - expected_de;
    let (mut lo, mut hi) = (0.0f64, (w + 1) as f64);
    if f(hi) < 0.0 {
        return Err(Error::NoRoot(format!(
            "peak expectation {} below {expected_de}",
            f(hi) + expected_de
        )));
    }
    while hi - lo > 1e-13 * hi {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi) * n_bin)
}

/// Accesses needed to build an eviction set by group elimination.
pub fn gem_eviction_set_cost(w: f64, l1: f64) -> f64 {
    2.3 * w * l1
}

/// Probability the less-loaded of two candidate bins holds exactly `n`:
/// `P_N^2 + 2 P_N P_{>=N+1}`.
pub fn transition_up(dist: &SteadyStateDist, n: usize) -> f64 {
    let p = dist.prob(n);
    p * p + 2.0 * p * dist.ln_tail(n + 1).exp()
}

/// Same event with the two candidates drawn from distinct per-skew
/// distributions, ties resolved toward `d0`.
pub fn transition_up_skewed(d0: &SteadyStateDist, d1: &SteadyStateDist, n: usize) -> f64 {
    let (p0, p1) = (d0.prob(n), d1.prob(n));
    p0 * p1 + p0 * d1.ln_tail(n + 1).exp() + p1 * d0.ln_tail(n + 1).exp()
}

/// Probability the fuller of two uniformly drawn balls sits in a bin with
/// exactly `n + 1` balls: `q_{N+1}^2 + 2 q_{N+1} sum_{i<=N} q_i`, where
/// `q_i = i P_i n_bin / n_ball`.
pub fn transition_down(dist: &SteadyStateDist, n: usize, n_ball: f64, n_bin: f64) -> f64 {
    let rho = n_ball / n_bin;
    let q = (n + 1) as f64 / rho * dist.prob(n + 1);
    q * q + 2.0 * q * dist.weighted_head(n, rho)
}

/// Extend `prefix` (`P_0..=P_k`, the last two entries acting as seeds) to
/// `P_0..=P_{n_max}` at load `rho`.
pub fn balance_chain(prefix: &[f64], rho: f64, n_max: usize, form: RecursionForm) -> Result<SteadyStateDist> {
    if prefix.len() < 2 {
        return Err(Error::Config("recursion needs two seed values".into()));
    }
    if prefix.iter().any(|p| !(0.0..=1.0).contains(p)) || !(rho > 0.0) {
        return Err(Error::Config("seeds must be probabilities and rho positive".into()));
    }
    let k = prefix.len() - 1;
    let seed_ln: Vec<f64> = prefix.iter().map(|p| p.ln()).collect();
    let head_mass: f64 = prefix.iter().sum();

    // First pass takes the tail mass beyond N as 1 - sum_{i<=N} P_i; later
    // passes replace it with the tail of the previous pass until stable.
    let mut prev: Option<Vec<f64>> = None;
    let mut ln_p = seed_ln.clone();
    let mut converged = false;
    // The slowest mode contracts by only a few percent per pass.
    for _ in 0..100_000 {
        ln_p = seed_ln.clone();
        let mut head = head_mass;
        let mut weighted: f64 = prefix.iter().enumerate().map(|(i, p)| i as f64 / rho * p).sum();
        for n in k..n_max {
            let ln_pn = ln_p[n];
            let b = 2.0 * (n + 1) as f64 / rho * weighted;
            let next = match form {
                RecursionForm::Approximate => {
                    if ln_pn == f64::NEG_INFINITY {
                        f64::NEG_INFINITY
                    } else if b <= 0.0 {
                        return Err(Error::ZeroDenominator("weighted occupancy sum"));
                    } else {
                        2.0 * ln_pn - b.ln()
                    }
                }
                RecursionForm::Balance => {
                    let ln_comp = match &prev {
                        Some(pp) => ln_sum(pp.iter().skip(n + 1).copied()),
                        None => (1.0 - head).max(0.0).ln(),
                    };
                    // c = P_N (P_N + 2 comp)
                    let ln_c = ln_pn + ln_add(ln_pn, std::f64::consts::LN_2 + ln_comp);
                    if ln_c == f64::NEG_INFINITY {
                        f64::NEG_INFINITY
                    } else if b <= 0.0 {
                        return Err(Error::ZeroDenominator("weighted occupancy sum"));
                    } else {
                        let a = ((n + 1) as f64 / rho).powi(2);
                        let four_ac = (4.0f64.ln() + a.ln() + ln_c).exp();
                        // 2c / (b + sqrt(b^2 + 4ac)) avoids cancellation.
                        std::f64::consts::LN_2 + ln_c - (b + (b * b + four_ac).sqrt()).ln()
                    }
                }
            };
            ln_p.push(next);
            let p = next.exp();
            head += p;
            weighted += (n + 1) as f64 / rho * p;
        }
        if form == RecursionForm::Approximate {
            converged = true;
            break;
        }
        converged = prev.as_ref().is_some_and(|pp| {
            pp.iter().zip(&ln_p).all(|(a, b)| {
                (a == b) || (a - b).abs() <= 1e-13 * a.abs().max(1.0)
            })
        });
        if converged {
            break;
        }
        prev = Some(ln_p.clone());
    }
    if !converged {
        return Err(Error::NoRoot("occupancy chain did not reach a fixed point".into()));
    }
    Ok(SteadyStateDist {
        ln_p,
        source: DistSource::Analytical,
        seed_index: Some(k),
    })
}

/// Tail at the default load from two adjacent observed values
/// `P_{n_start-1}`, `P_{n_start}`; entries below the seeds are zero.
pub fn occupancy_recursion(p_seed_n: f64, p_seed_n1: f64, n_start: usize, n_max: usize) -> Result<SteadyStateDist> {
    occupancy_recursion_with(p_seed_n, p_seed_n1, n_start, n_max, DEFAULT_LOAD, RecursionForm::Balance)
}

pub fn occupancy_recursion_with(
    p_seed_n: f64,
    p_seed_n1: f64,
    n_start: usize,
    n_max: usize,
    rho: f64,
    form: RecursionForm,
) -> Result<SteadyStateDist> {
    if n_start == 0 || n_max < n_start {
        return Err(Error::Config("need 1 <= n_start <= n_max".into()));
    }
    let mut prefix = vec![0.0; n_start + 1];
    prefix[n_start - 1] = p_seed_n;
    prefix[n_start] = p_seed_n1;
    balance_chain(&prefix, rho, n_max, form)
}

/// Per-insertion probability that both candidate sets of a capacity-`w`
/// structure are full at load `rho`:
/// `P_W^2 / (2 (W+1)/rho * sum_{i<=W} (i/rho) P_i)`.
pub fn de_probability_general(w: usize, dist: &SteadyStateDist, rho: f64) -> Result<f64> {
    Ok(ln_de_probability(w, dist, rho)?.exp())
}

/// [`de_probability_general`] at the default load, where it reads
/// `4 P_W^2 / ((W+1) sum_{i<=W} (i/8) P_i)`.
pub fn de_probability(w: usize, dist: &SteadyStateDist) -> Result<f64> {
    de_probability_general(w, dist, DEFAULT_LOAD)
}

pub fn ln_de_probability(w: usize, dist: &SteadyStateDist, rho: f64) -> Result<f64> {
    if dist.len() <= w {
        return Err(Error::Config(format!("distribution does not reach N = {w}")));
    }
    let ln_pw = dist.ln_prob(w);
    if ln_pw == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let den = 2.0 * (w + 1) as f64 / rho * dist.weighted_head(w, rho);
    if den <= 0.0 {
        return Err(Error::ZeroDenominator("weighted occupancy sum"));
    }
    Ok(2.0 * ln_pw - den.ln())
}

/// Expected insertions between DEs.
pub fn attacks_per_de(w: usize, dist: &SteadyStateDist, rho: f64) -> Result<f64> {
    Ok((-ln_de_probability(w, dist, rho)?).exp())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackCostReport {
    /// Exact decimal value.
    pub a_pht: String,
    pub a_pht_approx: f64,
    pub a_btb: String,
    pub a_btb_approx: f64,
    pub l1_est: f64,
    pub l2_est: f64,
    pub attacks_per_de: f64,
    pub capacity: usize,
    pub seed_index: Option<usize>,
    pub distribution: Vec<f64>,
    pub log10_distribution: Vec<f64>,
}

/// Assemble every cost for `cfg` from an occupancy distribution already
/// extended past the tag capacity.
pub fn attack_cost_report(cfg: &SimConfig, dist: &SteadyStateDist) -> Result<AttackCostReport> {
    let a_pht = reuse_attempts_pht_skews(cfg.pht_index_bits, cfg.pht_tag_bits, cfg.pht_skews as u32);
    let a_btb = reuse_attempts_btb(cfg.btb_index_bits, cfg.btb_tag_bits, cfg.btb_target_bits);
    let n_bin = cfg.btb_sets() as f64;
    let l1 = solve_first_de_accesses(n_bin, cfg.btb_ways as u64, 0.5)?;
    let capacity = cfg.btb_slots_per_set();
    let rho = cfg.btb_targets as f64 / n_bin;
    Ok(AttackCostReport {
        a_pht_approx: big_to_f64(&a_pht),
        a_pht: a_pht.to_string(),
        a_btb_approx: big_to_f64(&a_btb),
        a_btb: a_btb.to_string(),
        l1_est: l1,
        l2_est: gem_eviction_set_cost(cfg.btb_ways as f64, l1),
        attacks_per_de: attacks_per_de(capacity, dist, rho)?,
        capacity,
        seed_index: dist.seed_index,
        distribution: dist.probs(),
        log10_distribution: (0..dist.len()).map(|n| dist.log10_prob(n)).collect(),
    })
}
