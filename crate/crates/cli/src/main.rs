fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(vbsd_cli::run(&args));
}
