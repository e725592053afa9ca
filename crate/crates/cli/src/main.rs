use clap::Parser;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SATNERF_LOG", "info")).init();
    satnerf_cli::run(satnerf_cli::Cli::parse())
}
