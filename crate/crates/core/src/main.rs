use clap::Parser;
use rcdensity::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    std::process::exit(run(Cli::parse()));
}
