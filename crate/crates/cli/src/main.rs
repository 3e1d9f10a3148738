fn main() {
    std::process::exit(stdtrack_cli::run(std::env::args()));
}
