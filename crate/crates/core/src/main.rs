fn main() {
    std::process::exit(collapse_heat::cli::main_with_args(std::env::args_os()));
}
