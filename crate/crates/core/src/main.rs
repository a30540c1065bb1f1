fn main() {
    std::process::exit(lepski_huber::cli::run(std::env::args_os()));
}
