fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HRQ_LOG", "warn")).init();
    std::process::exit(hrq::cli::run_from(std::env::args_os()));
}
