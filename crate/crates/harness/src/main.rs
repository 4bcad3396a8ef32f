fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    mvp_harness::init_threads();
    std::process::exit(mvp_harness::cli::run(std::env::args_os()));
}
