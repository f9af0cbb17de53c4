fn main() {
    std::process::exit(samda::cli::dispatch(std::env::args_os()));
}
