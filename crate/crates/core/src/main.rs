fn main() {
    std::process::exit(tee_core::cli::run_command(std::env::args_os()));
}
