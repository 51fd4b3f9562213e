//! AC Newton-Raphson and DC power flow on the three-bus ring.

use metagrl::grid::three_bus_ring;
use metagrl::powerflow::{solve_ac, solve_dc, InjectionSet, PowerFlowConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = three_bus_ring();
    let mut inj = InjectionSet::zeros(spec.n_buses());
    inj.p = vec![0.0, -0.9, 0.3];
    inj.q = vec![0.0, -0.2, -0.05];

    let ac = solve_ac(&spec, &inj, &PowerFlowConfig::default())?;
    println!("AC converged={} in {} iterations, mismatch {:.2e}", ac.converged, ac.iterations, ac.mismatch);
    for (i, (v, a)) in ac.voltage.iter().zip(&ac.angle).enumerate() {
        println!("  bus {i}: |V| {v:.5} pu, angle {:.4} deg", a.to_degrees());
    }
    for f in &ac.flows {
        println!("  line {}: P {:+.4} Q {:+.4} loss {:.5}", f.line_id, f.p_from, f.q_from, f.loss);
    }
    println!("  slack supplies P {:.4} Q {:.4}", ac.slack_p, ac.slack_q);

    let dc = solve_dc(&spec, &inj.p)?;
    println!("DC angles (deg): {:?}", dc.angle.iter().map(|a| (a.to_degrees() * 1e4).round() / 1e4).collect::<Vec<_>>());
    Ok(())
}
