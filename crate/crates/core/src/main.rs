fn main() {
    std::process::exit(odekkl::cli::main_with_args(std::env::args_os()));
}
