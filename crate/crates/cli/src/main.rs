fn main() {
    std::process::exit(saicl_cli::run(std::env::args_os()));
}
