fn main() {
    std::process::exit(pixelrl::cli::main_with_args(std::env::args_os()));
}
