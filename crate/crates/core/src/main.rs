fn main() {
    std::process::exit(pairdiff::cli::main());
}
