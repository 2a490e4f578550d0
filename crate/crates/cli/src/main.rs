fn main() {
    std::process::exit(egif_cli::run(std::env::args_os()));
}
