fn main() {
    std::process::exit(demt_cli::run(std::env::args_os()));
}
