fn main() {
    std::process::exit(dap_core::cli::run(std::env::args_os()));
}
