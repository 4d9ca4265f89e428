fn main() {
    std::process::exit(djgp::cli::run(std::env::args_os()));
}
