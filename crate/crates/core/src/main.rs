fn main() {
    std::process::exit(spectralgp::harness::cli::main());
}
