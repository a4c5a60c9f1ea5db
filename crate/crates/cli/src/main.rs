fn main() {
    std::process::exit(ptrag_cli::run_from(std::env::args_os()));
}
