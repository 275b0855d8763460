fn main() {
    std::process::exit(mcvos::cli::run(std::env::args_os()));
}
