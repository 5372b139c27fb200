fn main() {
    std::process::exit(sa3::cli::run_from(std::env::args_os()));
}
