fn main() {
    std::process::exit(geodeph_cli::run());
}
