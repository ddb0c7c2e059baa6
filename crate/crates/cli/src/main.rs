fn main() {
    std::process::exit(gemlab_cli::run(std::env::args_os()));
}
