fn main() {
    std::process::exit(agecast::cli::dispatch(std::env::args_os()));
}
