fn main() {
    std::process::exit(psmas_cli::run_cli(std::env::args_os()));
}
