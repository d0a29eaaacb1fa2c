fn main() {
    std::process::exit(affect_cli::run(std::env::args_os()));
}
