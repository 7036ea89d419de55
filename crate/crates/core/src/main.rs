fn main() {
    std::process::exit(ipn_core::cli::main());
}
