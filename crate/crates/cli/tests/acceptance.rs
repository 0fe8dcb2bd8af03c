//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::Instant;

use cibpu::analytics::{
    attacks_per_de, balance_chain, big_to_f64, gem_eviction_set_cost, occupancy_recursion, reuse_attempts_btb,
    reuse_attempts_pht, solve_first_de_accesses, RecursionForm,
};
use cibpu::attacks::{de_probe, reduced_reuse_config, simulate_gem, simulate_reuse, AttackKind, AttackScenario};
use cibpu::binsballs::{
    balance_residual, histogram_probs, run_conventional_overflow, run_two_skew, BinsConfig, TwoSkewResult,
};
use cibpu::cibtb::{CibtbState, TargetId};
use cibpu::cipht::CiphtState;
use cibpu::keying::{dec_content, enc_content, low_mask};
use cibpu::trace::{gen_synthetic, run_trace, Predictor, SyntheticSpec};
use cibpu::{MappingMode, SimConfig};
use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn within_factor(obs: f64, expected: f64, f: f64) -> bool {
    obs > 0.0 && expected > 0.0 && obs / expected <= f && expected / obs <= f
}

fn c1_pht_cost() -> Outcome {
    let a = reuse_attempts_pht(13, 12);
    (a == BigUint::from(1u8) << 81u32, format!("A_pht = {a} ({:.3e})", big_to_f64(&a)))
}

fn c2_btb_cost() -> Outcome {
    let a = reuse_attempts_btb(12, 12, 48);
    let v = big_to_f64(&a);
    let ok = a == BigUint::from(1u8) << 72u32 && (v.log10() - 5e21f64.log10()).abs() < 0.5;
    (ok, format!("A_btb = {a} ({v:.3e})"))
}

fn c3_first_de() -> Outcome {
    let l1 = solve_first_de_accesses(4096.0, 8, 0.5).unwrap();
    ((7600.0..=7800.0).contains(&l1), format!("L1 = {l1:.1}"))
}

fn c4_overflow() -> Outcome {
    let cfg = BinsConfig {
        n_bin: 4096,
        n_ball: 0,
        capacity: 8,
        two_skew: false,
        seed: 4,
    };
    let r = run_conventional_overflow(&cfg, 10_000).unwrap();
    let ok = r.samples.len() >= 10_000 && (r.mean / 7730.0 - 1.0).abs() <= 0.05;
    (ok, format!("mean first overflow {:.1} +- {:.1} over {} trials", r.mean, r.std_error, r.samples.len()))
}

fn c5_gem() -> Outcome {
    let cost = gem_eviction_set_cost(8.0, 7690.0);
    let l1 = solve_first_de_accesses(64.0, 4, 0.5).unwrap();
    let scaled = gem_eviction_set_cost(4.0, l1);
    let g = simulate_gem(6, 4, 500, 5).unwrap();
    let ok = (1.3e5..=1.5e5).contains(&cost) && within_factor(g.mean_accesses, scaled, 2.0);
    (
        ok,
        format!("L2 = {cost:.4e}; 64x4 empirical {:.1} vs scaled formula {scaled:.1}", g.mean_accesses),
    )
}

fn c6_distribution(r: &TwoSkewResult) -> Outcome {
    let emp = histogram_probs(&r.histogram).unwrap();
    let chain = occupancy_recursion(emp.prob(4), emp.prob(5), 5, 20).unwrap();
    let mut ok = r.insertions >= 100_000_000;
    let mut detail = String::new();
    for n in 4..=9 {
        let (e, c) = (emp.prob(n), chain.prob(n));
        ok &= within_factor(e, c, 2.0);
        detail.push_str(&format!("P{n} {e:.3e}/{c:.3e} "));
    }
    for (n, order) in [(12, -8.0), (13, -15.0), (14, -31.0)] {
        let l = chain.log10_prob(n);
        ok &= (l - order).abs() <= 1.0;
        detail.push_str(&format!("log10 P{n} {l:.2} "));
    }
    (ok, detail.trim_end().to_string())
}

fn c7_de_rate(r: &TwoSkewResult) -> Outcome {
    let emp = histogram_probs(&r.histogram).unwrap();
    let chain = occupancy_recursion(emp.prob(4), emp.prob(5), 5, 20).unwrap();
    let full = attacks_per_de(13, &chain, 8.0).unwrap();
    let mut ok = (1e30..=1e33).contains(&full);
    let mut detail = format!("W=13 attacks/DE {full:.3e}");
    for w in [4u32, 5, 6] {
        let rho = w - 2;
        let cfg = BinsConfig {
            n_bin: 1024,
            n_ball: 1024 * rho,
            capacity: w,
            two_skew: true,
            seed: 7,
        };
        let run = run_two_skew(&cfg, 20_000_000).unwrap();
        let d = histogram_probs(&run.histogram).unwrap();
        let prefix: Vec<f64> = (0..=rho as usize).map(|n| d.prob(n)).collect();
        let ch = balance_chain(&prefix, rho as f64, 30, RecursionForm::Balance).unwrap();
        let est = attacks_per_de(w as usize, &ch, rho as f64).unwrap();
        let obs = run.attacks_per_de.unwrap_or(f64::INFINITY);
        ok &= within_factor(obs, est, 2.0);
        detail.push_str(&format!("; W={w} observed {obs:.0} vs {est:.0}"));
    }
    (ok, detail)
}

fn c8_zero_de() -> Outcome {
    let cfg = SimConfig {
        mapping: MappingMode::IdealOracle,
        ..SimConfig::default()
    };
    let mut btb = CibtbState::new(&cfg).unwrap();
    let r = de_probe(&mut btb, 1_000_000_000, 8).unwrap();
    let audit = btb.audit();
    (
        r.de_count == 0 && audit.is_empty() && r.insertions == 1_000_000_000,
        format!("{} insertions, {} DE, {} SE", r.insertions, r.de_count, r.se_count),
    )
}

fn c9_reuse() -> Outcome {
    let cases = [
        (AttackKind::ReusePht, reduced_reuse_config(2, 2, 1, 4), "pht I=2 T=2 1 skew"),
        (AttackKind::ReusePht, reduced_reuse_config(1, 1, 3, 4), "pht I=1 T=1 3 skews"),
        (AttackKind::ReuseBtb, reduced_reuse_config(3, 3, 1, 4), "btb I=3 T=3 N=4"),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (i, (kind, cfg, name)) in cases.into_iter().enumerate() {
        let r = simulate_reuse(&AttackScenario::new(kind, cfg, 10_000, 90 + i as u64)).unwrap();
        let all = r.success.iter().all(|&s| s);
        ok &= all && (r.mean / r.expected_approx - 1.0).abs() <= 0.10;
        detail.push(format!("{name}: {:.1} vs {}", r.mean, r.expected));
    }
    (ok, detail.join("; "))
}

fn pointer_audit() -> (bool, String) {
    let cfg = SimConfig::default();
    let mut btb = CibtbState::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pool: Vec<u64> = (0..60_000).map(|_| rng.random::<u64>() & low_mask(48) & !3).collect();
    let mut bad = 0;
    for op in 0..1_000_000u32 {
        let pc = pool[rng.random_range(0..pool.len())];
        let tid = rng.random_range(0..4);
        match rng.random_range(0..10) {
            0 => {
                let slot = TargetId(rng.random_range(0..btb.target_count() as u32));
                if btb.target_entry(slot).live {
                    btb.btb_invalidate_via_rptr(slot).unwrap();
                }
            }
            1 => {
                btb.btb_lookup(pc, tid).unwrap();
            }
            _ => {
                btb.access(pc, tid, rng.random::<u64>() & low_mask(48)).unwrap();
            }
        }
        if op % 100_000 == 99_999 {
            bad += btb.audit().len();
        }
    }
    (bad == 0, format!("audit violations {bad}"))
}

fn pht_coherence() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bad = 0;
    let mut ops = 0;
    for mode in [MappingMode::XorFold, MappingMode::MixedPermutation, MappingMode::IdealOracle] {
        for (i, t) in [(3, 2), (4, 3), (6, 4)] {
            let mut pht = CiphtState::with_params(i, t, 3, 8, mode, rng.random()).unwrap();
            for _ in 0..20_000 {
                pht.update(rng.random_range(0..256u64) << 2, rng.random_range(0..3), rng.random_bool(0.6));
                bad += pht.coherence_violations();
                ops += 1;
            }
        }
    }
    (bad == 0, format!("{ops} ops, {bad} violations"))
}

fn round_trip() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut bad = 0;
    for width in 1..=64u32 {
        for _ in 0..2000 {
            let v = rng.random::<u64>() & low_mask(width);
            let k = rng.random::<u64>();
            if dec_content(enc_content(v, width, k).unwrap(), width, k).unwrap() != v {
                bad += 1;
            }
        }
    }
    (bad == 0, format!("widths 1..=64, {bad} failures"))
}

fn residual(r: &TwoSkewResult) -> (bool, String) {
    let mut ok = true;
    let mut detail = Vec::new();
    for n in 4..=8 {
        let (m, se) = balance_residual(&r.flow_batches, n).unwrap();
        ok &= m.abs() <= 3.0 * se;
        detail.push(format!("N={n} z={:.2}", m / se));
    }
    (ok, detail.join(" "))
}

fn cli_determinism() -> (bool, String) {
    let dir = std::env::temp_dir().join(format!("cibpu-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cases: &[&[&str]] = &[
        &["analytics", "--defaults"],
        &["bins-two-skew", "--insertions", "1000000", "--format", "csv"],
        &["run-trace", "--synthetic", "--threads", "2"],
        &["attack", "--kind", "reuse-btb", "--index-bits", "3", "--tag-bits", "3", "--trials", "500"],
        &["selftest"],
    ];
    let mut ok = true;
    for (i, args) in cases.iter().enumerate() {
        let runs: Vec<Vec<u8>> = (0..2)
            .map(|k| {
                let path = dir.join(format!("{i}-{k}"));
                let status = Command::new(env!("CARGO_BIN_EXE_cibpu"))
                    .args(*args)
                    .arg("--output")
                    .arg(&path)
                    .status()
                    .unwrap();
                ok &= status.success();
                std::fs::read(&path).unwrap_or_default()
            })
            .collect();
        ok &= !runs[0].is_empty() && runs[0] == runs[1];
    }
    let _ = std::fs::remove_dir_all(&dir);
    (ok, format!("{} subcommands byte-identical", cases.len()))
}

fn trace_band() -> (bool, String) {
    let cfg = SimConfig::default();
    let mut worst: f64 = 0.0;
    for ws in [256u32, 1024, 4096] {
        for threads in [1u32, 2, 4] {
            let spec = SyntheticSpec {
                working_set_size: ws,
                thread_count: threads,
                ..SyntheticSpec::default()
            };
            let recs = gen_synthetic(&spec).unwrap();
            let a = run_trace(Predictor::Baseline, &cfg, &recs).unwrap().misprediction_rate();
            let b = run_trace(Predictor::Cibpu, &cfg, &recs).unwrap().misprediction_rate();
            worst = worst.max((a - b).abs());
        }
    }
    (worst <= 0.015, format!("max misprediction delta {:.2} points", worst * 100.0))
}

fn c10_properties(r: &TwoSkewResult) -> Outcome {
    let parts = [
        ("pointer audit", pointer_audit()),
        ("pht coherence", pht_coherence()),
        ("round trip", round_trip()),
        ("balance residual", residual(r)),
        ("cli determinism", cli_determinism()),
        ("trace band", trace_band()),
    ];
    let ok = parts.iter().all(|(_, (p, _))| *p);
    let detail = parts
        .iter()
        .map(|(name, (p, d))| format!("{name} {} ({d})", if *p { "ok" } else { "FAILED" }))
        .collect::<Vec<_>>()
        .join("; ");
    (ok, detail)
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: u32, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let (ok, detail) = f();
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {id:>2}: {} [{:.1}s] {detail}",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    };
    report(1, &mut c1_pht_cost);
    report(2, &mut c2_btb_cost);
    report(3, &mut c3_first_de);
    report(4, &mut c4_overflow);
    report(5, &mut c5_gem);
    // Shared 1e8-insertion run; its cost is charged to criterion 6.
    let steady = OnceLock::new();
    let defaults_run = || steady.get_or_init(|| run_two_skew(&BinsConfig::defaults(1), 100_000_000).unwrap());
    report(6, &mut || c6_distribution(defaults_run()));
    report(7, &mut || c7_de_rate(defaults_run()));
    report(8, &mut c8_zero_de);
    report(9, &mut c9_reuse);
    report(10, &mut || c10_properties(defaults_run()));
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
