fn main() {
    std::process::exit(stretchbend::cli::run(std::env::args_os()));
}
