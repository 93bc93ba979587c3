fn main() {
    std::process::exit(raceimpute::cli::run_with_args(std::env::args().collect()));
}
