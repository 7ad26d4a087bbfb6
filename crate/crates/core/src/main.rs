fn main() {
    std::process::exit(embracenet::cli::run_from(std::env::args_os()));
}
