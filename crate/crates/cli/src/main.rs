fn main() {
    std::process::exit(deep_eigenmaps_cli::run(std::env::args_os()));
}
