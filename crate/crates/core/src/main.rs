fn main() {
    std::process::exit(l4q::cli::run(std::env::args_os()));
}
