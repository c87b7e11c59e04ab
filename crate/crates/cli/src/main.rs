fn main() {
    std::process::exit(permbasin_cli::run(std::env::args_os()));
}
