fn main() {
    std::process::exit(nht_cli::run(std::env::args_os()));
}
