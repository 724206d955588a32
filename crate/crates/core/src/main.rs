fn main() {
    std::process::exit(recurflow::cli::run(std::env::args_os()));
}
