fn main() {
    std::process::exit(pairgeo::cli::run(std::env::args_os()));
}
