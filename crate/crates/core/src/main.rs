fn main() {
    std::process::exit(dva_core::cli::run(std::env::args_os()));
}
