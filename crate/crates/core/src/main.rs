fn main() {
    std::process::exit(cclg::cli::run_from(std::env::args_os()));
}
