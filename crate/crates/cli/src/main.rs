use std::io;

use graft_cli::{run, SEED_ENV};

fn main() {
    let seed = std::env::var(SEED_ENV).ok();
    let stdin = io::stdin();
    let code = run(
        std::env::args_os(),
        seed.as_deref(),
        &mut stdin.lock(),
        &mut io::stdout().lock(),
        &mut io::stderr().lock(),
    );
    std::process::exit(code);
}
