fn main() {
    std::process::exit(retina_grade::cli::run_cli(std::env::args_os()));
}
