fn main() {
    std::process::exit(mtlseg_cli::run(std::env::args_os()));
}
