fn main() {
    std::process::exit(zebra_cli::run(std::env::args_os()));
}
