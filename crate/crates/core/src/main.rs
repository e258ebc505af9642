fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(d2s_core::cli::run(&args));
}
