//! Print the default experiment configuration as TOML, ready to edit and pass to `--config`.

fn main() {
    let cfg = metagrl::harness::ExperimentConfig::default();
    print!("{}", toml::to_string(&cfg).expect("config serializes"));
}
