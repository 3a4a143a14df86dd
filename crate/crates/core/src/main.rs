fn main() {
    std::process::exit(binomoe::cli::main_with_args(std::env::args_os()));
}
