fn main() {
    std::process::exit(mf2::cli::run_from(std::env::args_os()));
}
