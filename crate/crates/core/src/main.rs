fn main() {
    std::process::exit(segfilter::cli::run(std::env::args_os()));
}
