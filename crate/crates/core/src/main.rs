fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CIOTA_LOG", "info")).init();
    std::process::exit(ciota::cli::main_with(std::env::args_os()));
}
