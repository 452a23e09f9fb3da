fn main() {
    std::process::exit(qsme_robust::cli::run(std::env::args_os()));
}
