fn main() {
    std::process::exit(fcppn::cli::main_with_args(std::env::args_os()));
}
