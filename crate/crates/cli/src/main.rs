fn main() { std::process::exit(cmmnl_cli::run(std::env::args())) }
