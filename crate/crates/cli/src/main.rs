fn main() {
    std::process::exit(shapefree_cli::run(std::env::args_os()));
}
