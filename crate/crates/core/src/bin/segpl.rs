fn main() {
    std::process::exit(segpl::cli::run(std::env::args_os()));
}
