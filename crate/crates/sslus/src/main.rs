fn main() {
    std::process::exit(sslus::cli::main_with_args(std::env::args_os()));
}
