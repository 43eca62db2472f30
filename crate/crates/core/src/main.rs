use clap::Parser;
use sakr::cli::{run, split_overrides, Cli};

fn main() {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(split) => split,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    };
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    if let Err(e) = run(cli, &overrides) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
