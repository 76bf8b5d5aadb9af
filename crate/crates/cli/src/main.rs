fn main() {
    std::process::exit(camac_cli::run(std::env::args_os()));
}
