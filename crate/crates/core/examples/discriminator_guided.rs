//! Train the trajectory discriminator and use it to pick `z` stage by stage.

use metagrl::discriminator::{guided_rollout, DiscriminatorConfig};
use metagrl::experiment::Desk;
use metagrl::scenario::sample;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let desk = Desk::standard();
    let (learner, _, _) = desk.train(2)?;
    let study = desk.discriminator_study(&learner, 60, &DiscriminatorConfig::default(), 2)?;
    println!(
        "held-out prefixes {}: accuracy len-1 {:.3}, half {:.3}; full-prefix rmse {:.4}",
        study.held_out_prefixes, study.accuracy_single, study.accuracy_half, study.rmse_full
    );

    let traces = desk.exploration_traces(&learner, 40, 77)?;
    let data = metagrl::discriminator::build_dataset(&traces, &learner, 0.7)?;
    let mut disc = metagrl::discriminator::Discriminator::new(learner.agent.act_dim(), learner.config.z_dim, DiscriminatorConfig::default(), 5);
    disc.train(&data, 5)?;
    for f in &desk.train {
        let (cost, zs) = guided_rollout(&learner, &mut disc, &desk.spec, &sample(f, 1), &desk.env)?;
        println!("{}: guided cost {cost:.1}, final z {:?}", f.label, zs.last().map(|z| z.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>()));
    }
    Ok(())
}
