fn main() {
    std::process::exit(l2swbm::cli::main_with_args(std::env::args_os()));
}
