fn main() {
    std::process::exit(ar_core::cli::main_with_args(std::env::args_os()));
}
