fn main() {
    std::process::exit(darcnn::cli::run());
}
