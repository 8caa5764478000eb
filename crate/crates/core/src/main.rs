fn main() {
    std::process::exit(blankskip::cli::run(std::env::args_os()));
}
