fn main() {
    std::process::exit(sarcasm_core::cli::run(std::env::args_os()));
}
