fn main() {
    std::process::exit(soe_core::cli::cli_dispatch(std::env::args_os()));
}
