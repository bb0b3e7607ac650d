fn main() {
    std::process::exit(dca_net::cli::run_from(std::env::args_os()));
}
