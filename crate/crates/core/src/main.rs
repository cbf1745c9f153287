fn main() {
    std::process::exit(spikehsi::cli::main_with_args(std::env::args_os()));
}
