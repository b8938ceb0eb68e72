fn main() {
    std::process::exit(mfbdsde_cli::main_from(std::env::args_os()));
}
