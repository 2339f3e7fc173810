fn main() {
    std::process::exit(expres_cli::run_command(std::env::args_os()));
}
