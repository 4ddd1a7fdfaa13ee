fn main() {
    std::process::exit(mlt_cli::main_with_args(std::env::args_os()));
}
