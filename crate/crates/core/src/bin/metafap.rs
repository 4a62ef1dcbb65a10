fn main() {
    std::process::exit(metafap::cli::run(std::env::args_os()));
}
