fn main() {
    std::process::exit(pdflow::cli::main_with_args(std::env::args_os()));
}
