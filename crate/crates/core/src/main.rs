fn main() {
    if let Err(e) = tcca::cli::init_threads() {
        eprintln!("error: {e}");
        std::process::exit(tcca::cli::exit_code(&e));
    }
    std::process::exit(tcca::cli::run(std::env::args_os()));
}
