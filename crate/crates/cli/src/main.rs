fn main() {
    std::process::exit(plmap_cli::main_with_args(std::env::args_os()));
}
