fn main() {
    std::process::exit(dcsnet::cli::run(std::env::args_os()));
}
