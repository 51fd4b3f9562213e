//! Runs the property suite and prints one line per check.

fn main() {
    let checks = metagrl::verify::run_all();
    print!("{}", metagrl::verify::render(&checks));
    if checks.iter().any(|c| !c.passed) {
        std::process::exit(2);
    }
}
