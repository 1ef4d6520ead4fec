fn main() {
    std::process::exit(earlyvit::cli::main());
}
