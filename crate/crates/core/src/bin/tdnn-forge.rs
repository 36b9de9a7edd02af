fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TDNN_FORGE_LOG", "warn")).init();
    let mut stdout = std::io::stdout().lock();
    let code = tdnn_forge::cli::main_with_args(std::env::args_os(), &mut stdout);
    std::process::exit(code);
}
