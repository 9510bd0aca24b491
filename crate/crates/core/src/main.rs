fn main() {
    std::process::exit(hmoe::cli::run(std::env::args_os()));
}
