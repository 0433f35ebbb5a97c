fn main() {
    std::process::exit(ddnn::cli::run(std::env::args_os()));
}
