fn main() {
    std::process::exit(proto_forge::cli::main_with_args(std::env::args_os()));
}
