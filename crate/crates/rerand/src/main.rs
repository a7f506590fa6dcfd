fn main() {
    std::process::exit(rerand::cli::run());
}
