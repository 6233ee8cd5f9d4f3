fn main() {
    std::process::exit(replaykit::cli::main_with_args(std::env::args_os()));
}
