fn main() {
    std::process::exit(darkdeblur::cli::run(std::env::args_os()));
}
