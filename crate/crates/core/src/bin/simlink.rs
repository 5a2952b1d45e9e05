fn main() {
    std::process::exit(simlink::cli::run(std::env::args_os()));
}
