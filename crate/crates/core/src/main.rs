fn main() {
    std::process::exit(depthcast::cli::run(std::env::args_os()));
}
