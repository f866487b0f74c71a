fn main() {
    std::process::exit(retake::cli::run(std::env::args_os()));
}
