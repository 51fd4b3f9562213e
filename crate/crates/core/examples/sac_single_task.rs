//! Soft actor-critic on a single noiseless family, without the context encoder.

use metagrl::env::{nominal_stage_cost, rollout, EnvConfig, NetworkModel};
use metagrl::grid::three_bus_ring;
use metagrl::matrix::Matrix;
use metagrl::sac::{ActMode, AgentPolicy, Experience, ReplayBuffer, SacAgent, SacBatch, SacConfig};
use metagrl::scenario::{expected_sample, make_demo_families};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = three_bus_ring();
    let mut fam = make_demo_families(8, &spec)[2].clone();
    fam.sigma = 0.0;
    let smp = expected_sample(&fam);
    let env = EnvConfig { network: NetworkModel::CopperPlate, reward_scale: nominal_stage_cost(&spec, &smp.profile), ..EnvConfig::default() };
    let cfg = SacConfig { alpha: 0.05, target_period: 1, critic_lr: 1e-3, actor_lr: 1e-3, ..SacConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let act_dim = spec.thermal.len() + spec.renewable.len() + spec.storage.len();
    let mut agent = SacAgent::new(metagrl::env::N_FEATURES, act_dim, 0, cfg, &mut rng)?;
    let mut buffer = ReplayBuffer::new(100_000);

    for episode in 0..150 {
        let trace = {
            let mut policy = AgentPolicy::new(&agent, ActMode::Stochastic, ChaCha8Rng::seed_from_u64(episode));
            rollout(&mut policy, &spec, &smp, &[], &env)?
        };
        for t in &trace.transitions {
            buffer.push(Experience::from_transition(t, 0));
        }
        agent.observe_rounds(trace.len() as u64)?;
        if buffer.len() >= agent.config.batch_size {
            for _ in 0..8 {
                let items = buffer.sample(agent.config.batch_size, &mut rng)?;
                let batch = SacBatch::new(&items);
                agent.train_step(&batch, &Matrix::zeros(batch.len(), 0), &mut rng)?;
            }
        }
        if episode % 25 == 0 {
            let mut greedy = AgentPolicy::new(&agent, ActMode::Deterministic, ChaCha8Rng::seed_from_u64(0));
            let eval = rollout(&mut greedy, &spec, &smp, &[], &env)?;
            println!("episode {episode:>3}: deterministic cost {:.1}", eval.total_cost);
        }
    }
    Ok(())
}
