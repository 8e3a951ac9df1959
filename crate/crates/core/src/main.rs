fn main() {
    std::process::exit(cpsrl::cli::main_with_args(std::env::args_os()));
}
