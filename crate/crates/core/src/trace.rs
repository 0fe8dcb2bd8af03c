//! Branch traces and trace-driven runs.
//!
//! Text format, one record per line: `tid pc kind taken target`, with `pc`
//! and `target` as `0x` hex, `kind` one of `C` (conditional), `J` (direct
//! jump) or `I` (indirect jump) and `taken` as `0`/`1`. Lines starting with
//! `#` and blank lines are skipped.

use std::fmt;
use std::io::BufRead;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{ConvBtbState, ConvPhtState};
use crate::cibtb::CibtbState;
use crate::cipht::CiphtState;
use crate::config::SimConfig;
use crate::keying::low_mask;
use crate::metrics::RunMetrics;
use crate::{seeded_rng, Error, Result};

pub const ADDRESS_BITS: u32 = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Conditional,
    DirectJump,
    IndirectJump,
}

impl BranchKind {
    fn code(self) -> char {
        match self {
            BranchKind::Conditional => 'C',
            BranchKind::DirectJump => 'J',
            BranchKind::IndirectJump => 'I',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tid: u32,
    pub pc: u64,
    pub kind: BranchKind,
    pub taken: bool,
    pub target: u64,
}

impl TraceRecord {
    /// Control leaves the fall-through path.
    pub fn redirects(&self) -> bool {
        self.taken || self.kind != BranchKind::Conditional
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:#x} {} {} {:#x}",
            self.tid,
            self.pc,
            self.kind.code(),
            self.taken as u8,
            self.target
        )
    }
}

fn parse_addr(s: &str, line: usize, what: &str) -> Result<u64> {
    let bad = |msg: String| Error::Parse { line, msg };
    let hex = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .ok_or_else(|| bad(format!("{what} must be 0x-prefixed hex")))?;
    let v = u64::from_str_radix(hex, 16).map_err(|e| bad(format!("{what}: {e}")))?;
    if v > low_mask(ADDRESS_BITS) {
        return Err(bad(format!("{what} {s} exceeds {ADDRESS_BITS} bits")));
    }
    Ok(v)
}

/// Parse one line; `None` for comments and blank lines.
pub fn parse_line(text: &str, line: usize) -> Result<Option<TraceRecord>> {
    let t = text.trim();
    if t.is_empty() || t.starts_with('#') {
        return Ok(None);
    }
    let bad = |msg: &str| Error::Parse {
        line,
        msg: msg.to_string(),
    };
    let f: Vec<&str> = t.split_whitespace().collect();
    if f.len() != 5 {
        return Err(bad("expected 5 fields: tid pc kind taken target"));
    }
    let tid = f[0].parse::<u32>().map_err(|_| bad("tid must be an unsigned 32-bit integer"))?;
    let pc = parse_addr(f[1], line, "pc")?;
    let kind = match f[2] {
        "C" | "c" => BranchKind::Conditional,
        "J" | "j" => BranchKind::DirectJump,
        "I" | "i" => BranchKind::IndirectJump,
        _ => return Err(bad("kind must be C, J or I")),
    };
    let taken = match f[3] {
        "0" => false,
        "1" => true,
        _ => return Err(bad("taken must be 0 or 1")),
    };
    let target = parse_addr(f[4], line, "target")?;
    Ok(Some(TraceRecord {
        tid,
        pc,
        kind,
        taken,
        target,
    }))
}

/// Parse a whole stream. Errors carry 1-based line numbers.
pub fn parse_trace(reader: impl BufRead) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        if let Some(r) = parse_line(&line?, i + 1)? {
            out.push(r);
        }
    }
    Ok(out)
}

pub fn parse_trace_str(s: &str) -> Result<Vec<TraceRecord>> {
    parse_trace(s.as_bytes())
}

pub fn serialize_trace(records: &[TraceRecord]) -> String {
    let mut s = String::with_capacity(records.len() * 32);
    for r in records {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub branch_count: u64,
    /// Distinct branch pcs per thread.
    pub working_set_size: u32,
    pub taken_bias: f64,
    pub thread_count: u32,
    pub seed: u64,
    /// Share of working-set pcs that are conditional.
    pub conditional_fraction: f64,
    /// Share of the remaining pcs that are indirect.
    pub indirect_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            branch_count: 100_000,
            working_set_size: 512,
            taken_bias: 0.9,
            thread_count: 1,
            seed: crate::DEFAULT_SEED,
            conditional_fraction: 0.8,
            indirect_fraction: 0.25,
        }
    }
}

struct SiteModel {
    pc: u64,
    kind: BranchKind,
    bias: f64,
    targets: [u64; 4],
}

/// Deterministic synthetic trace. Each thread owns a disjoint pc region;
/// each conditional site has taken probability
/// `taken_bias + j * min(taken_bias, 1 - taken_bias)`, `j` uniform in
/// `[-0.5, 0.5]`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<TraceRecord>> {
    if spec.working_set_size == 0 || spec.thread_count == 0 {
        return Err(Error::Config("working set and thread count must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.taken_bias)
        || !(0.0..=1.0).contains(&spec.conditional_fraction)
        || !(0.0..=1.0).contains(&spec.indirect_fraction)
    {
        return Err(Error::Config("bias and fractions must lie in [0, 1]".into()));
    }
    let mut rng = seeded_rng(spec.seed);
    let spread = spec.taken_bias.min(1.0 - spec.taken_bias);
    let sites: Vec<Vec<SiteModel>> = (0..spec.thread_count)
        .map(|t| {
            let base = 0x40_0000u64 + ((t as u64) << 32);
            (0..spec.working_set_size)
                .map(|_| {
                    let pc = (base + (rng.random_range(0..1u64 << 28) << 2)) & low_mask(ADDRESS_BITS);
                    let kind = if rng.random_bool(spec.conditional_fraction) {
                        BranchKind::Conditional
                    } else if rng.random_bool(spec.indirect_fraction) {
                        BranchKind::IndirectJump
                    } else {
                        BranchKind::DirectJump
                    };
                    let j: f64 = rng.random_range(-0.5..=0.5);
                    let bias = (spec.taken_bias + j * spread).clamp(0.0, 1.0);
                    let targets = std::array::from_fn(|_| (base + (rng.random_range(0..1u64 << 28) << 2)) & low_mask(ADDRESS_BITS));
                    SiteModel { pc, kind, bias, targets }
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(spec.branch_count as usize);
    for _ in 0..spec.branch_count {
        let tid = rng.random_range(0..spec.thread_count);
        let site = &sites[tid as usize][rng.random_range(0..spec.working_set_size) as usize];
        let (taken, target) = match site.kind {
            BranchKind::Conditional => (rng.random_bool(site.bias), site.targets[0]),
            BranchKind::DirectJump => (true, site.targets[0]),
            BranchKind::IndirectJump => (true, site.targets[rng.random_range(0..4)]),
        };
        out.push(TraceRecord {
            tid,
            pc: site.pc,
            kind: site.kind,
            taken,
            target,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    Baseline,
    Cibpu,
}

/// Predict, compare and train on every record. A PHT miss predicts taken.
/// The BTB is looked up on every record and trained on redirecting ones.
pub fn run_trace(predictor: Predictor, cfg: &SimConfig, records: &[TraceRecord]) -> Result<RunMetrics> {
    cfg.validate()?;
    let mut m = RunMetrics::default();
    match predictor {
        Predictor::Baseline => {
            let mut pht = ConvPhtState::new(cfg)?;
            let mut btb = ConvBtbState::new(cfg)?;
            for r in records {
                if r.kind == BranchKind::Conditional {
                    let a = pht.access(r.pc, Some(r.taken));
                    m.conditional_count += 1;
                    if a.taken.unwrap_or(true) != r.taken {
                        m.mispredictions += 1;
                    }
                }
                btb.access(r.pc, r.target, r.redirects());
            }
            let (p, b) = (pht.metrics(), btb.metrics());
            m.pht_lookups = p.pht_lookups;
            m.pht_hits = p.pht_hits;
            m.btb_lookups = b.btb_lookups;
            m.btb_hits = b.btb_hits;
            m.btb_misses = b.btb_misses;
            m.insertions = b.insertions;
        }
        Predictor::Cibpu => {
            let mut pht = CiphtState::new(cfg)?;
            let mut btb = CibtbState::new(cfg)?;
            for r in records {
                if r.kind == BranchKind::Conditional {
                    let l = pht.lookup(r.pc, r.tid);
                    m.conditional_count += 1;
                    if l.taken.unwrap_or(true) != r.taken {
                        m.mispredictions += 1;
                    }
                    pht.update(r.pc, r.tid, r.taken);
                }
                let l = btb.btb_lookup(r.pc, r.tid)?;
                if r.redirects() {
                    match (l.chosen_set, l.hit_slot) {
                        (Some(set), _) => {
                            btb.btb_insert(r.pc, r.tid, r.target, set)?;
                        }
                        (None, Some(slot)) if l.target != Some(r.target) => {
                            btb.btb_update_target(slot, r.pc, r.tid, r.target)?;
                        }
                        _ => {}
                    }
                }
            }
            let (p, b) = (pht.metrics(), btb.btb_metrics());
            m.pht_lookups = p.pht_lookups;
            m.pht_hits = p.pht_hits;
            m.btb_lookups = b.btb_lookups;
            m.btb_hits = b.btb_hits;
            m.btb_misses = b.btb_misses;
            m.insertions = b.insertions;
            m.se_count = b.se_count;
            m.de_count = b.de_count;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_example_line() {
        let r = parse_trace_str("1 0x400a10 C 1 0x400b00").unwrap();
        assert_eq!(
            r,
            vec![TraceRecord {
                tid: 1,
                pc: 0x400a10,
                kind: BranchKind::Conditional,
                taken: true,
                target: 0x400b00
            }]
        );
    }

    #[test]
    fn skips_comments_and_blanks() {
        let r = parse_trace_str("# header\n\n   \n0 0x10 J 1 0x20\n# tail\n").unwrap();
        assert_eq!(r.len(), 1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("0 0x10 C 1 0x20\n0 0x10 X 1 0x20", 2),
            ("# c\n0 0x10 C 2 0x20", 2),
            ("0 0x1000000000000 C 1 0x20", 1),
            ("0 0x10 C 1", 1),
            ("-1 0x10 C 1 0x20", 1),
            ("0 16 C 1 0x20", 1),
            ("\n\n0 0x10 C 1 0xfffffffffffff", 3),
        ];
        for (text, want) in cases {
            match parse_trace_str(text) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, want, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    /// Canonical form built with plain string operations.
    fn normalize(text: &str) -> String {
        let mut out = String::new();
        for line in text.lines() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = t.split_whitespace().collect();
            let hex = |s: &str| {
                let d = s[2..].to_ascii_lowercase();
                let d = d.trim_start_matches('0');
                format!("0x{}", if d.is_empty() { "0" } else { d })
            };
            let tid = f[0].trim_start_matches('0');
            out.push_str(&format!(
                "{} {} {} {} {}\n",
                if tid.is_empty() { "0" } else { tid },
                hex(f[1]),
                f[2].to_ascii_uppercase(),
                f[3],
                hex(f[4])
            ));
        }
        out
    }

    #[test]
    fn round_trip_random_corpus() {
        let mut rng = seeded_rng(77);
        let mut text = String::new();
        for i in 0..10_000 {
            if i % 97 == 0 {
                text.push_str("# comment line\n\n");
            }
            let pad = if rng.random_bool(0.3) { "00" } else { "" };
            let pc: u64 = rng.random_range(0..1u64 << 48);
            let tg: u64 = rng.random_range(0..1u64 << 48);
            let pcs = if rng.random_bool(0.5) { format!("{pc:X}") } else { format!("{pc:x}") };
            let kind = ["C", "J", "I", "c"][rng.random_range(0..4)];
            let sep = if rng.random_bool(0.2) { " \t " } else { " " };
            text.push_str(&format!(
                "{pad}{}{sep}0x{pad}{pcs} {kind} {} 0x{tg:x}\n",
                rng.random_range(0..8u32),
                rng.random_range(0..2u8)
            ));
        }
        let parsed = parse_trace_str(&text).unwrap();
        assert_eq!(parsed.len(), 10_000);
        assert_eq!(serialize_trace(&parsed), normalize(&text));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let s = SyntheticSpec {
            branch_count: 5000,
            thread_count: 3,
            ..Default::default()
        };
        let a = serialize_trace(&gen_synthetic(&s).unwrap());
        let b = serialize_trace(&gen_synthetic(&s).unwrap());
        assert_eq!(a, b);
        let other = serialize_trace(&gen_synthetic(&SyntheticSpec { seed: 1, ..s }).unwrap());
        assert_ne!(a, other);
    }

    #[test]
    fn full_bias_is_always_taken() {
        let s = SyntheticSpec {
            branch_count: 20_000,
            taken_bias: 1.0,
            ..Default::default()
        };
        assert!(gen_synthetic(&s).unwrap().iter().all(|r| r.taken));
    }

    #[test]
    fn threads_own_disjoint_pcs() {
        let s = SyntheticSpec {
            branch_count: 20_000,
            thread_count: 4,
            ..Default::default()
        };
        let t = gen_synthetic(&s).unwrap();
        for r in &t {
            assert_eq!((r.pc - 0x40_0000) >> 32, r.tid as u64);
        }
    }

    #[test]
    fn empty_trace_gives_zero_metrics() {
        for p in [Predictor::Baseline, Predictor::Cibpu] {
            assert_eq!(run_trace(p, &SimConfig::default(), &[]).unwrap(), RunMetrics::default());
        }
    }

    #[test]
    fn repeated_taken_branch_saturates() {
        let r = TraceRecord {
            tid: 0,
            pc: 0x40_1000,
            kind: BranchKind::Conditional,
            taken: true,
            target: 0x40_2000,
        };
        let recs = vec![r; 1000];
        for p in [Predictor::Baseline, Predictor::Cibpu] {
            let m = run_trace(p, &SimConfig::default(), &recs).unwrap();
            assert!(m.mispredictions <= 2, "{p:?} {m:?}");
            assert_eq!(m.conditional_count, 1000);
            assert!(m.btb_hits <= m.btb_lookups && m.pht_hits <= m.pht_lookups);
        }
    }

    #[test]
    fn metrics_are_deterministic() {
        let t = gen_synthetic(&SyntheticSpec {
            branch_count: 30_000,
            thread_count: 2,
            ..Default::default()
        })
        .unwrap();
        for p in [Predictor::Baseline, Predictor::Cibpu] {
            let cfg = SimConfig::default();
            assert_eq!(run_trace(p, &cfg, &t).unwrap(), run_trace(p, &cfg, &t).unwrap());
        }
    }

    #[test]
    fn rekeying_a_lone_thread_keeps_its_hit_sequence() {
        // Small working set: no conflicts, so hits depend only on history.
        let t = gen_synthetic(&SyntheticSpec {
            branch_count: 20_000,
            working_set_size: 16,
            ..Default::default()
        })
        .unwrap();
        let moved: Vec<TraceRecord> = t.iter().map(|r| TraceRecord { tid: 7, ..*r }).collect();
        let cfg = SimConfig::default();
        let a = run_trace(Predictor::Cibpu, &cfg, &t).unwrap();
        let b = run_trace(Predictor::Cibpu, &cfg, &moved).unwrap();
        assert_eq!((a.btb_hits, a.mispredictions), (b.btb_hits, b.mispredictions));
    }
}
