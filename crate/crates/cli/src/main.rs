fn main() {
    std::process::exit(alfa_cli::cli_main(std::env::args_os()));
}
