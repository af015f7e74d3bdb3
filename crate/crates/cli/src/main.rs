fn main() {
    std::process::exit(terrapref_cli::run(std::env::args_os()));
}
