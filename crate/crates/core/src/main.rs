fn main() {
    std::process::exit(ratlab::cli::run_command(std::env::args_os()));
}
