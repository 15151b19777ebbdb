fn main() {
    std::process::exit(msrecon::cli::main_with_args(std::env::args_os().collect()));
}
