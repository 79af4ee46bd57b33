fn main() {
    std::process::exit(manet::cli::run(std::env::args_os()));
}
