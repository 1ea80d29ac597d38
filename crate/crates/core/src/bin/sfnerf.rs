fn main() {
    std::process::exit(sfnerf::cli::main());
}
