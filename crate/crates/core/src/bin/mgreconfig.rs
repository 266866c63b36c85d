fn main() {
    std::process::exit(microgrid_reconfig::cli::main_with_args(std::env::args_os()));
}
