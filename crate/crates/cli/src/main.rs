fn main() {
    std::process::exit(kst_cli::run(std::env::args_os()));
}
