fn main() {
    std::process::exit(stint::run(std::env::args().collect()));
}
