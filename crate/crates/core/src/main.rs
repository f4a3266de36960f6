fn main() {
    std::process::exit(hdx::cli::run(std::env::args_os()));
}
