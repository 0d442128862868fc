fn main() {
    std::process::exit(maml_alloc::cli::run(std::env::args_os()));
}
