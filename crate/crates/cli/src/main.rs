fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(maskgen_cli::run(&args));
}
