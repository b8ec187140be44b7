fn main() {
    std::process::exit(eds_core::cli::dispatch(std::env::args_os()));
}
