fn main() {
    std::process::exit(tlrm_cli::cli::run(std::env::args_os()));
}
