fn main() {
    std::process::exit(mlhgnn::cli::run(std::env::args_os()));
}
