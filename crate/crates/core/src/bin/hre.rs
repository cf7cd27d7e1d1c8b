fn main() {
    std::process::exit(hre_core::cli::main());
}
