fn main() {
    std::process::exit(spillsynth::cli::run());
}
