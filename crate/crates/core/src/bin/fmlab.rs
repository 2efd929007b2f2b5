fn main() {
    std::process::exit(inverse_fm::cli::main());
}
