//! Full desk-scale study: three training seeds, held-out adaptation and the discriminator.
//!
//! `cargo run --release --example desk_study -- 1 2 3`

use metagrl::experiment::{run_desk, Desk};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: Vec<u64> = std::env::args().skip(1).map(|s| s.parse()).collect::<Result<_, _>>()?;
    let seeds = if seeds.is_empty() { vec![1, 2, 3] } else { seeds };
    let desk = Desk::standard();
    let report = run_desk(&desk, &seeds, |line| println!("{line}"))?;
    for run in &report.runs {
        for s in &run.scores {
            println!("seed {} {:<16} oracle {:>9.1} agent {:>9.1} optimality {:.2}%", run.seed, s.label, s.ops_cost, s.agent_cost, s.optimality);
        }
    }
    println!("adaptation curve {:?}", report.adaptation.mean_curve);
    Ok(())
}
