fn main() {
    std::process::exit(fsd::cli::main_with_args(std::env::args_os()));
}
