//! One episode of the dispatch environment under a merit-order heuristic, per network model.

use metagrl::env::{rollout_absolute, DispatchAction, EnvConfig, NetworkModel};
use metagrl::grid::three_bus_ring;
use metagrl::scenario::{make_demo_families, sample};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = three_bus_ring();
    let fam = &make_demo_families(8, &spec)[0];
    let smp = sample(fam, 5);
    for network in [NetworkModel::CopperPlate, NetworkModel::Dc, NetworkModel::Ac] {
        let cfg = EnvConfig { network, ..EnvConfig::default() };
        // use all renewable output, cover the rest with thermal, leave storage idle
        let trace = rollout_absolute(
            |s| {
                let mut a = DispatchAction::zeros(&spec);
                a.p_re = s.re_max.clone();
                let residual = s.load_p.iter().sum::<f64>() - s.re_max.iter().sum::<f64>();
                let n = a.p_tg.len() as f64;
                a.p_tg.iter_mut().for_each(|p| *p = residual / n);
                a
            },
            &spec,
            &smp,
            &cfg,
        )?;
        println!("{network:?}: cost {:.1}, penalty {:.1}", trace.total_cost, trace.total_penalty);
        for t in &trace.transitions {
            println!("  t={} tg {:?} es {:?} reward {:.3}", t.t, t.action.p_tg.iter().map(|p| p.round()).collect::<Vec<_>>(), t.action.u_es, t.reward);
        }
    }
    Ok(())
}
