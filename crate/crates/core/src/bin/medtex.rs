fn main() {
    std::process::exit(medtex::cli::main_with_args(std::env::args_os()));
}
