fn main() {
    std::process::exit(stormchip_cli::run_from(std::env::args_os()));
}
