fn main() {
    std::process::exit(inpaint_core::cli::run(std::env::args_os()));
}
