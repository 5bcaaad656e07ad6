//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::path::Path;
use std::time::Instant;

use ccl_core::experiment::{default_k_grid, summary_csv, sweep, SummaryRow, Variant};
use ccl_core::gradcheck::{run_all, GradcheckConfig};
use ccl_core::labeling::Tier;
use ccl_core::losses::{consistency_loss, contrastive_loss};
use ccl_core::network::{ModelParams, NetworkConfig};
use ccl_core::pairs::{brute_force_pairs, build_pairs, check_invariants, mask_mismatches, pair_stats, PairSets};
use ccl_core::trainer::{ema_update, lr_schedule};
use ccl_core::{AblationMode, RunConfig, Trainer};
use common::{label_state, random_instance, random_probs, unit_rows};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean best accuracy and sample std over seeds 0..5 of the blobs preset,
/// recorded by a calibration pass and frozen here.
const CALIBRATED: [(AblationMode, f64, f64); 3] = [
    (AblationMode::Supervised, 0.929667, 0.044149),
    (AblationMode::FixmatchOnly, 0.951333, 0.031345),
    (AblationMode::Ccl, 0.949333, 0.031811),
];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn preset() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/blobs.json");
    RunConfig::from_file(&path, &[]).expect("blobs preset parses")
}

fn pair_oracle(instances: &[common::Instance]) -> Outcome {
    let start = Instant::now();
    let mut mismatches = 0;
    for inst in instances {
        let fast = build_pairs(&inst.state, &inst.psi);
        mismatches += mask_mismatches(&fast, &brute_force_pairs(&inst.state, &inst.psi)).len();
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 30.0,
        format!("{} instances, {mismatches} mask mismatches, {secs:.2}s", instances.len()),
    )
}

fn pair_invariants(instances: &[common::Instance]) -> Outcome {
    let mut violations = 0;
    let (mut ll_neg, mut hl_pos) = (0, 0);
    for inst in instances {
        let pairs = build_pairs(&inst.state, &inst.psi);
        violations += check_invariants(&pairs, &inst.state).len();
        let s = pair_stats(&pairs, &inst.state, None);
        ll_neg += s.neg_ll;
        hl_pos += s.pos_hl;
    }
    outcome(
        violations + ll_neg + hl_pos == 0,
        format!("{violations} structural violations, {ll_neg} L-L negatives, {hl_pos} H-L positives"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = match run_all(&GradcheckConfig::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let parts: Vec<String> = reports
        .iter()
        .map(|r| format!("{} {:.1e}", r.name, r.max_rel_error))
        .collect();
    outcome(
        reports.iter().all(|r| r.passed()) && worst < 1e-4 && secs < 60.0,
        format!("100 trials per suite, max rel error {worst:.2e} ({}), {secs:.2}s", parts.join(", ")),
    )
}

fn symmetric_pairs(n: usize, pos: &[(usize, usize)], neg: &[(usize, usize)]) -> PairSets {
    let mut p = PairSets::empty(n);
    for &(i, j) in pos {
        p.pos[[i, j]] = true;
        p.pos[[j, i]] = true;
    }
    for &(i, j) in neg {
        p.neg[[i, j]] = true;
        p.neg[[j, i]] = true;
    }
    p
}

fn loss_identities() -> Outcome {
    let mut failures = Vec::new();

    let z = ndarray::array![[0.6, 0.8], [1.0, 0.0]];
    let (l, _) = contrastive_loss(&z, &symmetric_pairs(2, &[(0, 1)], &[]), 0.07).unwrap();
    if l != 0.0 {
        failures.push(format!("single positive, no negative: {l}"));
    }

    // Equal similarities: every anchor term equals log(|P| + |N|). Anchor 0
    // carries the pairs; its partners only see anchor 0 as a positive.
    for (n_pos, n_neg) in [(1usize, 3usize), (2, 3), (3, 1)] {
        let n = 1 + n_pos + n_neg;
        let z = Array2::from_shape_fn((n, 3), |(_, j)| [0.48, 0.6, 0.64][j]);
        let pos: Vec<(usize, usize)> = (1..=n_pos).map(|j| (0, j)).collect();
        let neg: Vec<(usize, usize)> = (n_pos + 1..n).map(|j| (0, j)).collect();
        let (l, _) = contrastive_loss(&z, &symmetric_pairs(n, &pos, &neg), 0.07).unwrap();
        let expected = ((n_pos + n_neg) as f64).ln();
        if (l - expected).abs() > 1e-12 {
            failures.push(format!("equal similarities |P|={n_pos} |N|={n_neg}: {l} vs {expected}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut min_lc = f64::INFINITY;
    for _ in 0..1000 {
        let inst = random_instance(&mut rng, 32, 8);
        let pairs = build_pairs(&inst.state, &inst.psi);
        let t = rng.random_range(0.05..1.0);
        let z = unit_rows(&mut rng, inst.state.len(), 6);
        let (l, _) = contrastive_loss(&z, &pairs, t).unwrap();
        min_lc = min_lc.min(l);
    }
    if min_lc < 0.0 {
        failures.push(format!("negative L_c {min_lc}"));
    }

    let weak = ndarray::array![[0.5, 0.3, 0.2], [0.4, 0.4, 0.2], [0.94, 0.03, 0.03]];
    let strong = random_probs(&mut rng, 3, 3).mapv(f64::ln);
    let (l_u, g_u) = consistency_loss(weak.view(), strong.view(), 0.95).unwrap();
    if l_u != 0.0 || g_u.iter().any(|&v| v != 0.0) {
        failures.push(format!("gated-out L_u = {l_u}"));
    }

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("zero/equal-similarity/sign/gating identities hold; min L_c over 1000 draws {min_lc:.3e}")
        } else {
            failures.join("; ")
        },
    )
}

fn monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut tau_viol, mut phi_viol, mut neg_viol) = (0, 0, 0);
    for _ in 0..1000 {
        let inst = random_instance(&mut rng, 48, 10);
        let p = &inst.state.p_hat;
        let mut taus: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..=1.0)).collect();
        taus.sort_by(f64::total_cmp);
        let highs: Vec<usize> = taus
            .iter()
            .map(|&t| label_state(p, &inst.truth, t, inst.k).count(Tier::High))
            .collect();
        tau_viol += highs.windows(2).filter(|w| w[1] > w[0]).count();
        for w in taus.windows(2) {
            let a = label_state(p, &inst.truth, w[0], inst.k);
            let b = label_state(p, &inst.truth, w[1], inst.k);
            tau_viol += (0..p.nrows())
                .filter(|&v| b.tier[v] == Tier::High && a.tier[v] == Tier::Low)
                .count();
        }

        let mut prev: Option<(Vec<Vec<usize>>, usize)> = None;
        for k in 1..inst.state.n_classes {
            let s = label_state(p, &inst.truth, inst.tau, k);
            let negs = build_pairs(&s, &inst.psi).neg_count();
            if let Some((phi, prev_negs)) = &prev {
                neg_viol += usize::from(negs < *prev_negs);
                phi_viol += phi
                    .iter()
                    .zip(&s.phi)
                    .filter(|(old, new)| !old.iter().all(|x| new.contains(x)))
                    .count();
            }
            prev = Some((s.phi.clone(), negs));
        }
    }
    outcome(
        tau_viol + phi_viol + neg_viol == 0,
        format!("1000 instances: {tau_viol} tau, {phi_viol} complement, {neg_viol} negative-count violations"),
    )
}

fn schedule_and_ema() -> Outcome {
    let mut failures = Vec::new();
    let n = 5000;
    let first = lr_schedule(0, n, 0.03).unwrap();
    if first != 0.03 {
        failures.push(format!("lr(0) = {first}"));
    }
    let last = lr_schedule(n, n, 0.03).unwrap();
    // 0.03 * cos(7π/16) in 50-digit arithmetic.
    if (last - 0.005_852_709_660_483_848).abs() > 1e-9 {
        failures.push(format!("lr(N) = {last}"));
    }

    let net = NetworkConfig {
        hidden: vec![6],
        embed_dim: 3,
    };
    let params = ModelParams::init(2, 3, &net, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut ema = params.clone();
    for _ in 0..100 {
        ema_update(&mut ema, &params, 0.999);
    }
    let drift = ema.values().zip(params.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if drift > 1e-15 {
        failures.push(format!("EMA drifted {drift} from a constant target"));
    }
    let mut ema = params.zeros_like();
    let start: f64 = params.values().map(f64::abs).sum();
    for _ in 0..10_000 {
        ema_update(&mut ema, &params, 0.999);
    }
    let gap: f64 = ema.values().zip(params.values()).map(|(a, b)| (a - b).abs()).sum();
    let expected = start * 0.999f64.powi(10_000);
    if (gap - expected).abs() > 1e-9 * start {
        failures.push(format!("EMA gap {gap} vs geometric decay {expected}"));
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("lr(0)={first}, lr(N)={last:.12}, EMA fixed point and 0.999^t convergence")
        } else {
            failures.join("; ")
        },
    )
}

fn find(rows: &[SummaryRow], mode: AblationMode) -> &SummaryRow {
    rows.iter().find(|r| r.mode == mode).expect("mode was swept")
}

fn direction_of_effect() -> Outcome {
    let cfg = preset();
    let d = &cfg.data;
    let unlabeled = d.n_per_class * d.n_classes - d.n_labeled;
    let shape_ok = d.n_classes == 3
        && d.dim == 2
        && d.n_labeled == 12
        && unlabeled == 600
        && cfg.trainer.total_steps == 5000;
    if !shape_ok {
        return outcome(false, "blobs preset does not match the required task shape");
    }
    let start = Instant::now();
    let variants: Vec<Variant> = CALIBRATED
        .iter()
        .map(|&(mode, _, _)| Variant { mode, k: None })
        .collect();
    let rows = match sweep(&cfg, &variants, &[0, 1, 2, 3, 4], |_, _, _| {}) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let secs = start.elapsed().as_secs_f64();
    let (sup, fix, ccl) = (
        find(&rows, AblationMode::Supervised),
        find(&rows, AblationMode::FixmatchOnly),
        find(&rows, AblationMode::Ccl),
    );
    let pooled = |a: &SummaryRow, b: &SummaryRow| ((a.std.powi(2) + b.std.powi(2)) / 2.0).sqrt();
    let mut failures = Vec::new();
    if ccl.mean < fix.mean - pooled(ccl, fix) {
        failures.push("ccl below fixmatch_only by more than 1 std".to_string());
    }
    if fix.mean < sup.mean - pooled(fix, sup) {
        failures.push("fixmatch_only below supervised by more than 1 std".to_string());
    }
    for &(mode, mean, std) in &CALIBRATED {
        let got = find(&rows, mode).mean;
        if (got - mean).abs() > std {
            failures.push(format!("{} mean {got:.4} left calibrated {mean:.4} ± {std:.4}", mode.name()));
        }
    }
    if secs > 600.0 {
        failures.push(format!("took {secs:.0}s"));
    }
    let summary = format!(
        "supervised {:.4}±{:.4}, fixmatch_only {:.4}±{:.4}, ccl {:.4}±{:.4} ({secs:.0}s)",
        sup.mean, sup.std, fix.mean, fix.std, ccl.mean, ccl.std
    );
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            summary
        } else {
            format!("{summary}: {}", failures.join("; "))
        },
    )
}

fn k_ablation() -> Outcome {
    let cfg = preset();
    let ks = default_k_grid(cfg.data.n_classes);
    let variants: Vec<Variant> = ks
        .iter()
        .map(|&k| Variant {
            mode: AblationMode::Ccl,
            k: Some(k),
        })
        .collect();
    let rows = match sweep(&cfg, &variants, &[0, 1], |_, _, _| {}) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let csv = summary_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    let header_ok = lines.first() == Some(&"mode,k,n_seeds,mean_acc,std_acc,accs");
    let rows_ok = lines.len() == ks.len() + 1
        && lines[1..].iter().zip(&ks).all(|(line, k)| {
            let f: Vec<&str> = line.split(',').collect();
            f.len() == 6
                && f[1] == k.to_string()
                && f[3].parse::<f64>().is_ok_and(|a| (0.0..=1.0).contains(&a))
                && f[5].split(';').count() == 2
        });
    let accs: Vec<String> = rows.iter().map(|r| format!("k={} {:.4}", r.k, r.mean)).collect();
    outcome(
        header_ok && rows_ok,
        format!("k grid {ks:?} -> {} summary rows ({})", lines.len() - 1, accs.join(", ")),
    )
}

fn determinism() -> Outcome {
    let cfg = preset()
        .with_overrides(&["trainer.total_steps=1000".into()])
        .expect("override applies");
    let run = || -> ccl_core::Result<String> {
        let mut t = Trainer::new(cfg.clone())?;
        t.run()?;
        Ok(t.metrics_csv())
    };
    match (run(), run()) {
        (Ok(a), Ok(b)) => outcome(a == b, format!("two 1000-step runs, {} bytes of metrics.csv, identical: {}", a.len(), a == b)),
        (Err(e), _) | (_, Err(e)) => outcome(false, e.to_string()),
    }
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Instant::now();
    let instances: Vec<common::Instance> = (0..1000).map(|_| random_instance(&mut rng, 64, 10)).collect();
    let results = vec![
        ("pair-oracle equivalence", pair_oracle(&instances)),
        ("structural pair invariants", pair_invariants(&instances)),
        ("gradient suite", gradient_suite()),
        ("loss identities", loss_identities()),
        ("monotonicity", monotonicity()),
        ("schedule and EMA", schedule_and_ema()),
        ("direction of effect", direction_of_effect()),
        ("k-ablation shape", k_ablation()),
        ("determinism", determinism()),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!(
        "{} of {} criteria passed in {:.0}s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
