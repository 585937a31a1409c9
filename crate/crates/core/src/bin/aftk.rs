fn main() {
    std::process::exit(aftk::cli::main_with_args(std::env::args_os()));
}
