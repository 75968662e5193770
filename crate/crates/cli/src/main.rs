fn main() {
    std::process::exit(vasparse_cli::cli_main(std::env::args_os()));
}
