fn main() {
    std::process::exit(loft_cli::run(std::env::args_os()));
}
