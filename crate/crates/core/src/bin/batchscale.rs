fn main() {
    std::process::exit(batchscale::cli::main_with_args(std::env::args_os()));
}
