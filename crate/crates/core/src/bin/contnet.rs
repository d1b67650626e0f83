fn main() {
    std::process::exit(contnet::cli::run());
}
