//! Demonstration scenario families: expected profiles and one seeded draw as CSV.

use metagrl::grid::three_bus_ring;
use metagrl::scenario::{expected_sample, families_to_toml_string, make_demo_families, sample};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = three_bus_ring();
    let fams = make_demo_families(8, &spec);
    for f in &fams {
        let mean = expected_sample(f);
        let net: Vec<String> = (0..f.horizon).map(|t| format!("{:.0}", mean.profile.net_load(t))).collect();
        println!("{:>2} {:<16} sigma {:.2} net load {}", f.id, f.label, f.sigma, net.join(" "));
    }
    println!("\nseeded draw of family 3:");
    sample(&fams[3], 42).write_csv(std::io::stdout())?;
    if std::env::args().any(|a| a == "--toml") {
        print!("{}", families_to_toml_string(&fams));
    }
    Ok(())
}
