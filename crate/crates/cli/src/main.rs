fn main() {
    std::process::exit(face3d_cli::main_with(std::env::args_os()));
}
