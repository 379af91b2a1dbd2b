fn main() {
    std::process::exit(dina::cli::run(std::env::args_os()));
}
