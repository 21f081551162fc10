fn main() {
    std::process::exit(advgdro::cli::run(std::env::args_os()));
}
