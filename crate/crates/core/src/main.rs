fn main() {
    std::process::exit(ssb_core::cli::run(std::env::args_os()));
}
