fn main() {
    std::process::exit(vton_cli::run_cli(std::env::args_os()));
}
