fn main() {
    std::process::exit(emgup_cli::run(std::env::args_os()));
}
