fn main() {
    std::process::exit(poseclip::cli::run(std::env::args_os()));
}
