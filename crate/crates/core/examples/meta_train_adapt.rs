//! Meta-train on two families, save a checkpoint, reload it and adapt to a third family.

use metagrl::experiment::Desk;
use metagrl::meta::{meta_test, AdaptOptions, MetaLearner};
use metagrl::scenario::sample;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let desk = Desk::standard();
    let (learner, outcome, secs) = desk.train(1)?;
    let last = outcome.log.last().expect("at least one iteration");
    println!("trained {} iterations in {secs:.1}s, last rollout cost {:.1}", outcome.log.len(), last.rollout_cost);

    let dir = std::env::temp_dir().join("metagrl-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("checkpoint.json");
    learner.save(&path)?;
    let learner = MetaLearner::load(&path)?;
    println!("checkpoint {} ({})", path.display(), learner.base_checksum());

    let smp = sample(&desk.held_out, 9);
    let run = meta_test(&learner, &desk.spec, |_| smp.clone(), &desk.env, &AdaptOptions::default(), 9)?;
    for r in &run.rounds {
        println!("round {}: cost {:.1}, posterior sigma[0] {:.3}", r.round, r.cost, r.posterior.sigma[0]);
    }
    Ok(())
}
