fn main() {
    std::process::exit(exmem::cli::main_with_args(std::env::args_os()));
}
