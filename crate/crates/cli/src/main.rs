fn main() {
    std::process::exit(fd_cli::cli_dispatch(std::env::args_os()));
}
