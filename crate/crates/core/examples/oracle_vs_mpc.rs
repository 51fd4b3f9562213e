//! Perfect-foresight DP oracle against receding-horizon MPC of several lengths.

use metagrl::baselines::{mpc_episode_cost, ops_oracle, optimality, DpDiscretization, MpcConfig, OracleNetwork};
use metagrl::grid::three_bus_ring;
use metagrl::scenario::{expected_sample, make_demo_families};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = three_bus_ring();
    let disc = DpDiscretization { energy_res: 2.5, re_step: 0.125, network: OracleNetwork::Dc, ..Default::default() };
    for mut fam in make_demo_families(8, &spec) {
        fam.sigma = 0.0;
        fam.outages.clear();
        let smp = expected_sample(&fam);
        let ops = ops_oracle(&spec, &smp, &disc)?;
        print!("{:<16} OPS {:>9.1} ({} states)", fam.label, ops.cost, ops.max_states);
        for n in [1, 2, 4, 8] {
            let (c, warnings) = mpc_episode_cost(&spec, &fam, &smp, &MpcConfig { horizon: n, ..MpcConfig::default() })?;
            print!(" | MPC-{n} {c:.1} ({:.1}%){}", optimality(ops.cost, c)?, if warnings > 0 { "*" } else { "" });
        }
        println!();
    }
    Ok(())
}
