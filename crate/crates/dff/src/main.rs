fn main() {
    std::process::exit(dff::cli::run(std::env::args_os()));
}
