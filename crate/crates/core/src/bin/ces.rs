fn main() {
    std::process::exit(ces_core::cli::run(std::env::args_os()));
}
