fn main() {
    std::process::exit(kerbs::cli::run(std::env::args().collect()));
}
