//! Bins-and-balls abstraction of BTB set occupancy.
//!
//! Bins are sets, balls are live targets. The conventional model throws
//! balls uniformly until some bin overflows. The two-skew model places each
//! ball in the less-loaded of two candidate bins (one per skew, ties to skew
//! 0) and, once the pool is full, removes the ball of the fuller bin among
//! two uniformly drawn balls.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::{DistSource, SteadyStateDist};
use crate::{seeded_rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinsConfig {
    pub n_bin: u32,
    pub n_ball: u32,
    /// Balls a bin holds before overflowing.
    pub capacity: u32,
    pub two_skew: bool,
    pub seed: u64,
}

impl BinsConfig {
    /// Defaults: 4096 sets, 32768 targets, 13 tag slots per set.
    pub fn defaults(seed: u64) -> Self {
        Self {
            n_bin: 4096,
            n_ball: 32768,
            capacity: 13,
            two_skew: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bin == 0 {
            return Err(Error::Config("n_bin must be positive".into()));
        }
        if self.two_skew {
            if !self.n_bin.is_multiple_of(2) {
                return Err(Error::Config("two-skew model needs an even bin count".into()));
            }
            if self.capacity == 0 || self.capacity > 255 {
                return Err(Error::Config("two-skew capacity must be in 1..=255".into()));
            }
            if self.n_ball == 0 || self.n_ball as u64 > self.n_bin as u64 * self.capacity as u64 {
                return Err(Error::Config("n_ball must be in 1..=n_bin * capacity".into()));
            }
        }
        Ok(())
    }

    pub fn load(&self) -> f64 {
        self.n_ball as f64 / self.n_bin as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyHistogram {
    pub counts: Vec<u64>,
    pub total_observations: u64,
}

impl OccupancyHistogram {
    pub fn with_len(n: usize) -> Self {
        Self {
            counts: vec![0; n],
            total_observations: 0,
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total_observations = counts.iter().sum();
        Self {
            counts,
            total_observations,
        }
    }

    pub fn record(&mut self, n: usize) {
        if n >= self.counts.len() {
            self.counts.resize(n + 1, 0);
        }
        self.counts[n] += 1;
        self.total_observations += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        if other.counts.len() > self.counts.len() {
            self.counts.resize(other.counts.len(), 0);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total_observations += other.total_observations;
    }

    /// `N,count,probability` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("N,count,probability\n");
        let total = self.total_observations.max(1) as f64;
        for (n, &c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{n},{c},{:e}", c as f64 / total);
        }
        s
    }

    /// Parse the output of [`to_csv`](Self::to_csv); the probability column,
    /// the header and `#` comment lines are ignored.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut counts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with('N') {
                continue;
            }
            let mut f = line.split(',');
            let bad = |msg: &str| Error::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let n: usize = f.next().and_then(|x| x.trim().parse().ok()).ok_or_else(|| bad("bad N"))?;
            let c: u64 = f.next().and_then(|x| x.trim().parse().ok()).ok_or_else(|| bad("bad count"))?;
            if n >= counts.len() {
                counts.resize(n + 1, 0);
            }
            counts[n] += c;
        }
        Ok(Self::from_counts(counts))
    }
}

/// Normalize a histogram into an empirical distribution.
pub fn histogram_probs(h: &OccupancyHistogram) -> Result<SteadyStateDist> {
    if h.total_observations == 0 {
        return Err(Error::EmptyHistogram);
    }
    let total = h.total_observations as f64;
    let p: Vec<f64> = h.counts.iter().map(|&c| c as f64 / total).collect();
    Ok(SteadyStateDist::from_probs(&p, DistSource::Empirical))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverflowResult {
    pub samples: Vec<u64>,
    pub mean: f64,
    pub std_error: f64,
}

/// Throw balls uniformly into `n_bin` bins until any bin holds
/// `capacity + 1`; repeat for `trials` independent trials.
pub fn run_conventional_overflow(cfg: &BinsConfig, trials: u32) -> Result<OverflowResult> {
    if cfg.two_skew {
        return Err(Error::Config("conventional overflow needs two_skew = false".into()));
    }
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let mut bins = vec![0u32; cfg.n_bin as usize];
    let mut samples = Vec::with_capacity(trials as usize);
    for _ in 0..trials {
        bins.fill(0);
        let mut throws = 0u64;
        loop {
            throws += 1;
            let b = rng.random_range(0..cfg.n_bin) as usize;
            bins[b] += 1;
            if bins[b] > cfg.capacity {
                break;
            }
        }
        samples.push(throws);
    }
    let (mean, std_error) = mean_se(samples.iter().map(|&x| x as f64));
    Ok(OverflowResult {
        samples,
        mean,
        std_error,
    })
}

pub(crate) fn mean_se(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    if n == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, f64::NAN);
    }
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    /// Loads of the two candidate bins before the insertion.
    pub loads: [u32; 2],
    pub chosen_skew: usize,
    /// A ball was removed through the two-candidate global eviction.
    pub global_eviction: bool,
    /// The chosen bin was full and lost one of its own balls.
    pub de: bool,
}

const FREE: u32 = u32::MAX;

/// Stepwise two-skew simulator.
#[derive(Debug, Clone)]
pub struct TwoSkewSim {
    cfg: BinsConfig,
    half: u32,
    occ: Vec<u32>,
    members: Vec<u32>,
    ball_bin: Vec<u32>,
    ball_pos: Vec<u32>,
    free: Vec<u32>,
    rng: ChaCha8Rng,
    insertions: u64,
    de_count: u64,
}

impl TwoSkewSim {
    pub fn new(cfg: BinsConfig) -> Result<Self> {
        if !cfg.two_skew {
            return Err(Error::Config("two-skew simulation needs two_skew = true".into()));
        }
        cfg.validate()?;
        Ok(Self {
            half: cfg.n_bin / 2,
            occ: vec![0; cfg.n_bin as usize],
            members: vec![FREE; cfg.n_bin as usize * cfg.capacity as usize],
            ball_bin: vec![FREE; cfg.n_ball as usize],
            ball_pos: vec![0; cfg.n_ball as usize],
            free: (0..cfg.n_ball).rev().collect(),
            rng: seeded_rng(cfg.seed),
            insertions: 0,
            de_count: 0,
            cfg,
        })
    }

    pub fn occupancy(&self) -> &[u32] {
        &self.occ
    }

    pub fn insertions(&self) -> u64 {
        self.insertions
    }

    pub fn de_count(&self) -> u64 {
        self.de_count
    }

    pub fn live_balls(&self) -> u64 {
        (self.cfg.n_ball as usize - self.free.len()) as u64
    }

    fn detach(&mut self, ball: u32) {
        let bin = self.ball_bin[ball as usize] as usize;
        let cap = self.cfg.capacity as usize;
        let pos = self.ball_pos[ball as usize] as usize;
        let last_pos = self.occ[bin] as usize - 1;
        let last = self.members[bin * cap + last_pos];
        self.members[bin * cap + pos] = last;
        self.ball_pos[last as usize] = pos as u32;
        self.members[bin * cap + last_pos] = FREE;
        self.occ[bin] -= 1;
        self.ball_bin[ball as usize] = FREE;
    }

    pub fn step(&mut self) -> StepOutcome {
        let b0 = self.rng.random_range(0..self.half);
        let b1 = self.half + self.rng.random_range(0..self.half);
        let loads = [self.occ[b0 as usize], self.occ[b1 as usize]];
        let (tgt, chosen_skew) = if loads[0] <= loads[1] { (b0, 0) } else { (b1, 1) };

        let mut global_eviction = false;
        let slot = match self.free.pop() {
            Some(s) => s,
            None => {
                let r0 = self.rng.random_range(0..self.cfg.n_ball);
                let r1 = self.rng.random_range(0..self.cfg.n_ball);
                let m0 = self.occ[self.ball_bin[r0 as usize] as usize];
                let m1 = self.occ[self.ball_bin[r1 as usize] as usize];
                let s = if m0 >= m1 { r0 } else { r1 };
                self.detach(s);
                global_eviction = true;
                s
            }
        };

        let tgt = tgt as usize;
        let cap = self.cfg.capacity as usize;
        let mut de = false;
        if self.occ[tgt] as usize >= cap {
            let p = self.rng.random_range(0..self.occ[tgt]) as usize;
            let victim = self.members[tgt * cap + p];
            self.detach(victim);
            self.free.push(victim);
            self.de_count += 1;
            de = true;
        }
        let pos = self.occ[tgt] as usize;
        self.members[tgt * cap + pos] = slot;
        self.ball_pos[slot as usize] = pos as u32;
        self.ball_bin[slot as usize] = tgt as u32;
        self.occ[tgt] += 1;
        self.insertions += 1;
        StepOutcome {
            loads,
            chosen_skew,
            global_eviction,
            de,
        }
    }

    /// Check membership bookkeeping against the occupancy counters.
    pub fn audit(&self) -> bool {
        let cap = self.cfg.capacity as usize;
        let mut live = 0u64;
        for (bin, &n) in self.occ.iter().enumerate() {
            for p in 0..cap {
                let m = self.members[bin * cap + p];
                if (p < n as usize) != (m != FREE) {
                    return false;
                }
                if p < n as usize
                    && (self.ball_bin[m as usize] != bin as u32 || self.ball_pos[m as usize] != p as u32)
                {
                    return false;
                }
            }
            live += n as u64;
        }
        live == self.live_balls()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoSkewResult {
    /// Census over all bins.
    pub histogram: OccupancyHistogram,
    /// Census split by skew: index 0 covers the first half of the bins.
    pub skew_histograms: [OccupancyHistogram; 2],
    /// Consecutive census batches, for batch-means error estimates.
    pub batches: Vec<OccupancyHistogram>,
    /// Per-batch sums of census-level balance flows.
    pub flow_batches: Vec<FlowBatch>,
    pub insertions: u64,
    pub de_count: u64,
    /// `insertions / de_count`, absent when no DE occurred.
    pub attacks_per_de: Option<f64>,
}

/// Balance flows evaluated on each census snapshot and summed over a batch.
/// `up[n]` is the probability the less-loaded candidate holds exactly `n`
/// balls (candidates drawn per skew, ties to skew 0); `down[n]` is the
/// probability the fuller of two uniformly drawn balls sits in a bin with
/// `n + 1` balls. Averaging per snapshot keeps products of fractions exact
/// under finite-population fluctuation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FlowBatch {
    pub up: Vec<f64>,
    pub down: Vec<f64>,
    pub censuses: u64,
}

impl FlowBatch {
    fn with_len(levels: usize) -> Self {
        Self {
            up: vec![0.0; levels],
            down: vec![0.0; levels],
            censuses: 0,
        }
    }

    fn record(&mut self, c0: &[u64], c1: &[u64], n_ball: u64) {
        let h0 = c0.iter().sum::<u64>().max(1) as f64;
        let h1 = c1.iter().sum::<u64>().max(1) as f64;
        let levels = self.up.len();
        let mut tail0 = vec![0.0; c0.len() + 1];
        let mut tail1 = vec![0.0; c1.len() + 1];
        for n in (0..c0.len()).rev() {
            tail0[n] = tail0[n + 1] + c0[n] as f64 / h0;
            tail1[n] = tail1[n + 1] + c1[n] as f64 / h1;
        }
        let q = |i: usize| (i as u64 * (c0[i] + c1[i])) as f64 / n_ball as f64;
        let mut head = 0.0;
        for n in 0..levels {
            let (p0, p1) = (c0[n] as f64 / h0, c1[n] as f64 / h1);
            self.up[n] += p0 * p1 + p0 * tail1[n + 1] + p1 * tail0[n + 1];
            head += q(n);
            let qn = q(n + 1);
            self.down[n] += qn * qn + 2.0 * qn * head;
        }
        self.censuses += 1;
    }

    /// Mean of `up[n] - down[n]` over the batch's censuses.
    pub fn residual(&self, n: usize) -> f64 {
        (self.up[n] - self.down[n]) / self.censuses.max(1) as f64
    }
}

/// Batch-means estimate of the balance residual at level `n`: mean and
/// standard error of the per-batch `up - down`.
pub fn balance_residual(batches: &[FlowBatch], n: usize) -> Result<(f64, f64)> {
    let r: Vec<f64> = batches.iter().filter(|b| b.censuses > 0).map(|b| b.residual(n)).collect();
    if r.len() < 2 || n >= batches[0].up.len() {
        return Err(Error::EmptyHistogram);
    }
    Ok(mean_se(r.iter().copied()))
}

/// Run `insertions` two-skew insertions. After `n_ball` warm-up insertions
/// every bin is censused once per `n_bin` insertions. Censuses are grouped
/// into `batch_count` consecutive batches.
pub fn run_two_skew(cfg: &BinsConfig, insertions: u64) -> Result<TwoSkewResult> {
    run_two_skew_batched(cfg, insertions, 32)
}

pub fn run_two_skew_batched(cfg: &BinsConfig, insertions: u64, batch_count: u32) -> Result<TwoSkewResult> {
    let mut sim = TwoSkewSim::new(*cfg)?;
    let bins = cfg.n_bin as u64;
    let warm = cfg.n_ball as u64;
    let hist_len = cfg.capacity as usize + 1;
    let censuses = insertions.saturating_sub(warm).div_ceil(bins);
    let per_batch = censuses.div_ceil(batch_count.max(1) as u64).max(1);
    let mut skew_histograms = [OccupancyHistogram::with_len(hist_len), OccupancyHistogram::with_len(hist_len)];
    let mut batches = Vec::new();
    let mut batch = OccupancyHistogram::with_len(hist_len);
    let mut flow_batches = Vec::new();
    let mut flow = FlowBatch::with_len(hist_len - 1);
    let mut census = [vec![0u64; hist_len], vec![0u64; hist_len]];
    let mut taken = 0u64;
    for t in 0..insertions {
        sim.step();
        if t >= warm && (t - warm).is_multiple_of(bins) {
            census.iter_mut().for_each(|c| c.fill(0));
            for (b, &n) in sim.occ.iter().enumerate() {
                let skew = (b as u32 >= sim.half) as usize;
                skew_histograms[skew].record(n as usize);
                census[skew][n as usize] += 1;
                batch.record(n as usize);
            }
            flow.record(&census[0], &census[1], cfg.n_ball as u64);
            taken += 1;
            if taken.is_multiple_of(per_batch) {
                batches.push(std::mem::replace(&mut batch, OccupancyHistogram::with_len(hist_len)));
                flow_batches.push(std::mem::replace(&mut flow, FlowBatch::with_len(hist_len - 1)));
            }
        }
    }
    if batch.total_observations > 0 {
        batches.push(batch);
        flow_batches.push(flow);
    }
    let mut histogram = skew_histograms[0].clone();
    histogram.merge(&skew_histograms[1]);
    let de = sim.de_count();
    Ok(TwoSkewResult {
        histogram,
        skew_histograms,
        batches,
        flow_batches,
        insertions,
        de_count: de,
        attacks_per_de: (de > 0).then(|| insertions as f64 / de as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn snapshot_flows_match_hand_count() {
        // Skew 0 bins hold {1, 2}, skew 1 bins hold {2, 3}; 8 balls.
        let mut f = FlowBatch::with_len(3);
        f.record(&[0, 1, 1, 0], &[0, 0, 1, 1], 8);
        // Pairs (1,2) (1,3) (2,2) (2,3): the less-loaded candidate holds 1, 1, 2, 2.
        assert!((f.up[2] - 0.5).abs() < 1e-12);
        assert!((f.up[1] - 0.5).abs() < 1e-12);
        // Ball fractions q1 = 1/8, q2 = 4/8, q3 = 3/8; down at 2 is q3^2 + 2 q3 (q1 + q2).
        let down2 = 9.0 / 64.0 + 2.0 * 3.0 / 8.0 * 5.0 / 8.0;
        assert!((f.down[2] - down2).abs() < 1e-12);
        assert_eq!(f.censuses, 1);
    }

    #[test]
    fn balance_residual_is_small_on_a_short_run() {
        let cfg = BinsConfig {
            n_bin: 256,
            n_ball: 256 * 4,
            capacity: 9,
            two_skew: true,
            seed: 3,
        };
        let r = run_two_skew(&cfg, 4_000_000).unwrap();
        assert_eq!(r.flow_batches.len(), r.batches.len());
        for n in 2..=6 {
            let (m, se) = balance_residual(&r.flow_batches, n).unwrap();
            assert!(m.abs() <= 4.0 * se, "N={n} residual {m} se {se}");
        }
        assert!(balance_residual(&r.flow_batches[..1], 3).is_err());
    }

    fn small(capacity: u32, seed: u64) -> BinsConfig {
        BinsConfig {
            n_bin: 64,
            n_ball: 64 * 4,
            capacity,
            two_skew: true,
            seed,
        }
    }

    #[test]
    fn single_bin_zero_capacity_overflows_at_once() {
        let cfg = BinsConfig {
            n_bin: 1,
            n_ball: 0,
            capacity: 0,
            two_skew: false,
            seed: 1,
        };
        let r = run_conventional_overflow(&cfg, 50).unwrap();
        assert!(r.samples.iter().all(|&s| s == 1));
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn single_bin_overflow_is_deterministic() {
        let cfg = BinsConfig {
            n_bin: 1,
            n_ball: 0,
            capacity: 5,
            two_skew: false,
            seed: 1,
        };
        assert_eq!(run_conventional_overflow(&cfg, 3).unwrap().mean, 6.0);
    }

    #[test]
    fn histogram_probs_normalizes() {
        let h = OccupancyHistogram::from_counts(vec![0, 10, 10]);
        let d = histogram_probs(&h).unwrap();
        assert_eq!(d.prob(1), 0.5);
        assert_eq!(d.prob(2), 0.5);
        assert_eq!(d.prob(0), 0.0);
        let h = OccupancyHistogram::from_counts(vec![3, 7, 11, 13, 17, 19]);
        let d = histogram_probs(&h).unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(histogram_probs(&OccupancyHistogram::default()), Err(Error::EmptyHistogram)));
    }

    #[test]
    fn csv_round_trip() {
        let h = OccupancyHistogram::from_counts(vec![1, 0, 5, 9]);
        let csv = h.to_csv();
        assert_eq!(csv.lines().next(), Some("N,count,probability"));
        assert_eq!(OccupancyHistogram::from_csv(&csv).unwrap(), h);
        assert!(OccupancyHistogram::from_csv("N,count\nx,1").is_err());
    }

    #[test]
    fn less_loaded_bin_is_chosen() {
        let mut sim = TwoSkewSim::new(small(8, 5)).unwrap();
        for _ in 0..1_000_000 {
            let o = sim.step();
            let want = if o.loads[0] <= o.loads[1] { 0 } else { 1 };
            assert_eq!(o.chosen_skew, want);
        }
    }

    #[test]
    fn two_skew_rejects_overfull_pool() {
        let mut c = small(4, 0);
        c.n_ball = 64 * 4 + 1;
        assert!(TwoSkewSim::new(c).is_err());
        c.n_bin = 63;
        assert!(c.validate().is_err());
    }

    #[test]
    fn de_only_when_both_candidates_full() {
        let mut sim = TwoSkewSim::new(small(5, 9)).unwrap();
        let mut des = 0;
        for _ in 0..200_000 {
            let o = sim.step();
            if o.de {
                des += 1;
                assert_eq!(o.loads, [5, 5]);
            }
        }
        assert!(des > 0);
        assert_eq!(sim.de_count(), des);
        assert!(sim.audit());
    }

    #[test]
    fn census_counts_every_bin() {
        let cfg = small(8, 3);
        let r = run_two_skew(&cfg, 256 + 64 * 100).unwrap();
        assert_eq!(r.histogram.total_observations, 64 * 100);
        assert_eq!(r.skew_histograms[0].total_observations, 32 * 100);
        let from_batches: u64 = r.batches.iter().map(|b| b.total_observations).sum();
        assert_eq!(from_batches, 64 * 100);
        // Mean occupancy equals the load once the pool is full.
        let d = histogram_probs(&r.histogram).unwrap();
        let mean: f64 = d.probs().iter().enumerate().map(|(i, p)| i as f64 * p).sum();
        assert!((mean - 4.0).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ball_conservation(seed in any::<u64>(), cap in 5u32..10, steps in 0usize..3000) {
            let mut sim = TwoSkewSim::new(small(cap, seed)).unwrap();
            for t in 1..=steps {
                sim.step();
                let expected = (t as u64).min(256);
                let occ: u64 = sim.occupancy().iter().map(|&x| x as u64).sum();
                prop_assert_eq!(occ, sim.live_balls());
                if sim.de_count() == 0 {
                    prop_assert_eq!(sim.live_balls(), expected);
                }
            }
            prop_assert!(sim.audit());
        }
    }
}
