fn main() {
    let code = esn_dagmm::cli::run(std::env::args().collect());
    std::process::exit(code);
}
