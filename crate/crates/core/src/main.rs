fn main() {
    std::process::exit(autocontext::cli::run(std::env::args_os()));
}
