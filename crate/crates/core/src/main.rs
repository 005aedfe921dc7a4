fn main() {
    std::process::exit(smallvae::cli::main_with_args(std::env::args_os()));
}
