fn main() {
    std::process::exit(u3m::cli::run(std::env::args_os()));
}
