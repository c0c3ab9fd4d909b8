fn main() {
    std::process::exit(trajcluster::cli::main_with_args(std::env::args_os()));
}
