fn main() {
    let code = margin_ensemble::cli::run(std::env::args_os());
    std::process::exit(code);
}
