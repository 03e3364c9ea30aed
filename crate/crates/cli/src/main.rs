fn main() {
    std::process::exit(netml_cli::run(std::env::args_os()));
}
