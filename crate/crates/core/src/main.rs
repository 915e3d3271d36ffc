fn main() {
    std::process::exit(elastic_moe::harness::cli::run(std::env::args_os()));
}
