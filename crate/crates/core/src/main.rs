fn main() {
    std::process::exit(spectral_ancestry::cli::main(std::env::args_os()));
}
