fn main() {
    std::process::exit(csngf::cli::run(std::env::args_os()));
}
