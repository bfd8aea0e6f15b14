fn main() {
    std::process::exit(mvil::cli::run(std::env::args_os()));
}
