fn main() {
    std::process::exit(dimodif::cli::main_with_args());
}
