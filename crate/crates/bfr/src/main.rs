fn main() {
    std::process::exit(bfr::cli::run(std::env::args().collect()));
}
