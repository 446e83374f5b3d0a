fn main() {
    std::process::exit(lasers::cli::run(std::env::args_os()));
}
