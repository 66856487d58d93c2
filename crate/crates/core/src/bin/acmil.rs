fn main() {
    std::process::exit(acmil::cli::main_with_args(std::env::args_os()));
}
