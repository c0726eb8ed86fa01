fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = inrank_lab::run_cli(std::env::args_os(), std::env::var(inrank_lab::SEED_ENV).ok());
    std::process::exit(code);
}
