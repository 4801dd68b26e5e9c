fn main() {
    std::process::exit(dpm::cli::run(std::env::args_os()));
}
