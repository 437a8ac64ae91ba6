fn main() {
    std::process::exit(resclip::cli::main_with_args(std::env::args_os()));
}
