use clap::{Args, Parser, Subcommand};
use metagrl::harness::{cmd_adapt, cmd_eval, cmd_oracle, cmd_train, cmd_verify, ExperimentConfig, HarnessError};
use metagrl::verify::render;
use std::path::PathBuf;
use std::process::ExitCode;

/// Meta graph reinforcement learning for multi-stage dispatch.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Meta-train on the configured training families.
    Train(Common),
    /// Compare a checkpoint with MPC and the oracle, per family.
    Eval(Common),
    /// Adaptation curve on a new family.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Also run the discriminator-guided episode per trial.
        #[arg(long)]
        with_discriminator: bool,
    },
    /// Perfect-foresight dispatch on each family's expected profile.
    Oracle(Common),
    /// Run the property suite.
    Verify {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated family ids.
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<usize>>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Training iterations for `train`, adaptation rounds otherwise.
    #[arg(long)]
    rounds: Option<usize>,
}

impl Common {
    fn config(&self, command: &str) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if let Some(r) = self.rounds {
            match command {
                "train" => cfg.schedule.iterations = r,
                "eval" => cfg.eval.rounds = r,
                _ => cfg.eval.adapt_rounds = r,
            }
        }
        if command == "train" {
            if let Some(f) = &self.families {
                cfg.train_families = f.clone();
            }
        }
        Ok(cfg)
    }
}

fn run(cmd: Cmd) -> Result<(), HarnessError> {
    match cmd {
        Cmd::Train(c) => {
            let m = cmd_train(c.config("train")?, |line| eprintln!("{line}"))?;
            println!("trained run {} ({} files)", m.run_id, m.files.len());
        }
        Cmd::Eval(c) => {
            let (_, rows) = cmd_eval(c.config("eval")?, c.checkpoint.as_deref(), c.families.as_deref())?;
            for r in rows {
                let opt = r.optimality.map_or("unavailable".to_string(), |o| format!("{o:.2}%"));
                println!("family {} {:<16} meta-grl {:.1} optimality {opt}", r.family_id, r.label, r.meta_grl);
            }
        }
        Cmd::Adapt { common, with_discriminator } => {
            let family = common.families.as_ref().and_then(|f| f.first().copied());
            let (_, curve) = cmd_adapt(common.config("adapt")?, common.checkpoint.as_deref(), family, None, with_discriminator)?;
            for (r, c) in curve.iter().enumerate() {
                println!("round {r} mean cost {c:.1}");
            }
        }
        Cmd::Oracle(c) => {
            let (_, costs) = cmd_oracle(c.config("oracle")?, c.families.as_deref())?;
            for (id, cost) in costs {
                println!("family {id} oracle cost {cost:.1}");
            }
        }
        Cmd::Verify { out } => {
            let checks = cmd_verify(out.as_deref())?;
            print!("{}", render(&checks));
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(HarnessError::VerifyFailed(failed));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
