fn main() {
    std::process::exit(mmcc_cli::run_command(std::env::args_os()));
}
