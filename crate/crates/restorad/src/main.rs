fn main() {
    let code = restorad::cli::run(std::env::args_os());
    std::process::exit(code);
}
