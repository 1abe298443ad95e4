fn main() {
    std::process::exit(langrl_core::harness::cli_run(std::env::args_os()));
}
