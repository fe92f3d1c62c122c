fn main() {
    std::process::exit(cmae::cli::run(std::env::args_os()));
}
