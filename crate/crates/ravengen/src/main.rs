fn main() {
    std::process::exit(ravengen::cli::run(std::env::args()));
}
