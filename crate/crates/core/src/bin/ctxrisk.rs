fn main() {
    std::process::exit(ctxrisk::cli::main_with_args(std::env::args_os()));
}
