fn main() {
    std::process::exit(liftlab::harness::cli::run(std::env::args_os()));
}
