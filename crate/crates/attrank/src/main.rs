fn main() {
    std::process::exit(attrank::cli::run(std::env::args_os()));
}
