fn main() {
    std::process::exit(mediation_cli::main_with_args(std::env::args_os()));
}
