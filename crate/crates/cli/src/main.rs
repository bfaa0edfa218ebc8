fn main() {
    std::process::exit(cooctex_cli::run(std::env::args_os()));
}
