fn main() {
    std::process::exit(lbtr::cli_io::run(std::env::args_os()));
}
