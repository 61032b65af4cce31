use clap::Parser;
use mast_cli::{init_threads, run, Cli, EXIT_OK};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads(std::env::var("MAST_THREADS").ok().as_deref()).and_then(|_| run(cli));
    match result {
        Ok(()) => std::process::exit(EXIT_OK),
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            std::process::exit(e.code);
        }
    }
}
