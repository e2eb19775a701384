fn main() {
    std::process::exit(pdno_cli::run(std::env::args()));
}
