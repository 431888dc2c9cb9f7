fn main() {
    std::process::exit(latentcf_cli::run(std::env::args_os()));
}
