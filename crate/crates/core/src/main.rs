fn main() {
    std::process::exit(bonmf::cli::run(std::env::args_os()));
}
