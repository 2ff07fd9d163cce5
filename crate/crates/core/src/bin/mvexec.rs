fn main() {
    std::process::exit(mvexec::cli::main_with(std::env::args_os()));
}
