fn main() {
    std::process::exit(trainwatch_cli::run(std::env::args_os()));
}
