fn main() {
    std::process::exit(mechnet_cli::run(std::env::args_os()));
}
