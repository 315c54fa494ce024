fn main() {
    std::process::exit(fruitgrader_cli::run(std::env::args_os()));
}
