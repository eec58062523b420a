fn main() {
    std::process::exit(latte::cli::run(std::env::args_os()));
}
