fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    mfg3d::cli::configure_threads();
    std::process::exit(mfg3d::cli::dispatch(std::env::args_os()));
}
