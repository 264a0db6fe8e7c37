fn main() {
    std::process::exit(vqsr::cli::run_cli(std::env::args_os()));
}
