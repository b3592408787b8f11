fn main() {
    std::process::exit(crsfl::cli::main_with_args(std::env::args().collect()));
}
