fn main() {
    svsm_lab::cli::init_logging();
    let code = svsm_lab::cli::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
