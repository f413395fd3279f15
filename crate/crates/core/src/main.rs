fn main() {
    std::process::exit(remeta::cli::run());
}
