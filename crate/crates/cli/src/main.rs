fn main() {
    std::process::exit(sbrenorm_cli::main_with_args(std::env::args_os()));
}
