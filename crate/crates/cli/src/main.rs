use clap::Parser;
use mclr_cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli, std::env::vars()) {
        eprintln!("mclr: {e}");
        std::process::exit(e.exit_code());
    }
}
