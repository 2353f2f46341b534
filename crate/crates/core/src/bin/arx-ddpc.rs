fn main() {
    std::process::exit(arx_ddpc::cli::run(std::env::args_os()));
}
