//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any fails.

use metagrl::experiment::{run_desk, Desk};
use metagrl::verify::{self, Check};
use std::process::ExitCode;
use std::time::Instant;

struct Line {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn from_check(name: &'static str, c: &Check, budget_s: Option<f64>) -> Line {
    let in_time = budget_s.map_or(true, |b| c.seconds < b);
    let mut detail = format!("{} ({:.1}s)", c.detail, c.seconds);
    if !in_time {
        detail += &format!(" over the {:.0}s budget", budget_s.unwrap_or_default());
    }
    Line { name, passed: c.passed && in_time, detail }
}

fn main() -> ExitCode {
    let mut lines = Vec::new();

    let checks = vec![
        verify::reference_values(),
        verify::gradient_integrity(),
        verify::gcn_correctness(),
        verify::power_flow_validity(),
        verify::environment_conservation(),
        verify::oracle_exactness(),
        verify::mpc_sanity(),
        verify::kl_formula(),
    ];
    lines.push(from_check("optimality metric reproduces the five reference values", &checks[0], None));
    let all = checks.iter().all(|c| c.passed);
    lines.push(Line {
        name: "property suite stands in for the full-scale runs",
        passed: all,
        detail: format!("{}/{} property checks pass", checks.iter().filter(|c| c.passed).count(), checks.len()),
    });
    lines.push(from_check("gradient integrity of J_Q, J_pi, beta*KL, L_dr", &checks[1], Some(60.0)));
    lines.push(from_check("GCN hand example and permutation equivariance", &checks[2], None));
    lines.push(from_check("power-flow validity", &checks[3], None));
    lines.push(from_check("environment energy conservation and complementarity", &checks[4], None));
    lines.push(from_check("DP oracle exactness and refinement", &checks[5], Some(300.0)));
    lines.push(from_check("MPC ordering and full-horizon gap", &checks[6], Some(300.0)));

    let t = Instant::now();
    let desk = Desk::standard();
    match run_desk(&desk, &[1, 2, 3], |msg| eprintln!("  {msg}")) {
        Ok(r) => {
            let ok_seeds = r.runs.iter().filter(|s| s.min_optimality() >= 85.0 && s.train_seconds <= 1800.0).count();
            let per_seed: Vec<String> = r
                .runs
                .iter()
                .map(|s| format!("seed {}: {:.2}% in {:.0}s", s.seed, s.min_optimality(), s.train_seconds))
                .collect();
            lines.push(Line {
                name: "desk-scale learning within 15% of the oracle (2 of 3 seeds)",
                passed: ok_seeds >= 2,
                detail: per_seed.join("; "),
            });
            let sep_ok = r.runs.iter().filter(|s| s.separation > 1.0).count();
            lines.push(Line {
                name: "context separation ratio above 1 (2 of 3 seeds)",
                passed: sep_ok >= 2,
                detail: r.runs.iter().map(|s| format!("{:.2}", s.separation)).collect::<Vec<_>>().join(", "),
            });
            let a = &r.adaptation;
            lines.push(Line {
                name: "adaptation rounds 1..5 no worse than round 0 on a held-out family",
                passed: a.trials >= 10 && a.later <= a.round0,
                detail: format!("{} trials: round 0 {:.1}, rounds 1..5 {:.1}", a.trials, a.round0, a.later),
            });
            let d = &r.discriminator;
            lines.push(Line {
                name: "discriminator accuracy and full-prefix error",
                passed: d.held_out_prefixes >= 500
                    && d.accuracy_half >= d.accuracy_single
                    && d.rmse_full < d.half_centroid_distance,
                detail: format!(
                    "{} held-out prefixes; accuracy len-1 {:.3}, half {:.3}; rmse {:.4} vs half-distance {:.4}",
                    d.held_out_prefixes, d.accuracy_single, d.accuracy_half, d.rmse_full, d.half_centroid_distance
                ),
            });
        }
        Err(e) => {
            for name in [
                "desk-scale learning within 15% of the oracle (2 of 3 seeds)",
                "context separation ratio above 1 (2 of 3 seeds)",
                "adaptation rounds 1..5 no worse than round 0 on a held-out family",
                "discriminator accuracy and full-prefix error",
            ] {
                lines.push(Line { name, passed: false, detail: format!("desk study failed: {e}") });
            }
        }
    }
    eprintln!("  desk study took {:.1}s", t.elapsed().as_secs_f64());

    for l in &lines {
        println!("{} {:<68} {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
    }
    let failed = lines.iter().filter(|l| !l.passed).count();
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
