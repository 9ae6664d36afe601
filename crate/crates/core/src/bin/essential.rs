fn main() {
    std::process::exit(essential::cli::main());
}
