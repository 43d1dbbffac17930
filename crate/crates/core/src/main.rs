fn main() {
    std::process::exit(usfan::cli::run(std::env::args_os()));
}
