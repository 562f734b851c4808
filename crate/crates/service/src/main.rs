fn main() {
    std::process::exit(sourceconf_service::cli::run(std::env::args_os()));
}
