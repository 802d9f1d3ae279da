fn main() {
    std::process::exit(attnflow::cli::main_with_args(std::env::args_os()));
}
