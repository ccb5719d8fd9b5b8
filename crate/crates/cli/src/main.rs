fn main() {
    std::process::exit(cade::cli::main_with_args(std::env::args_os()));
}
