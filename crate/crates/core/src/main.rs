fn main() {
    std::process::exit(mstformer::cli::run(std::env::args_os()));
}
