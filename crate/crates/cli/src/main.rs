fn main() {
    std::process::exit(tlpe_cli::run(std::env::args_os()));
}
