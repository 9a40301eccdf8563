fn main() {
    std::process::exit(mami_head::cli::main_with_args(std::env::args_os()));
}
