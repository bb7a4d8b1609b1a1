fn main() {
    std::process::exit(slowregion::cli::dispatch(std::env::args_os()));
}
