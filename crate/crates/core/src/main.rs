fn main() {
    std::process::exit(mora::cli::run(std::env::args_os()));
}
