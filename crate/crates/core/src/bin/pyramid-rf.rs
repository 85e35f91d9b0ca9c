fn main() {
    std::process::exit(pyramid_rf::cli::cli_dispatch(std::env::args_os()));
}
