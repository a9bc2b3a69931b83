fn main() {
    std::process::exit(louiskv_cli::run_command(std::env::args_os().skip(1)));
}
