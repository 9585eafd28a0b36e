fn main() {
    std::process::exit(absfw::cli::main_with_args(std::env::args_os()));
}
