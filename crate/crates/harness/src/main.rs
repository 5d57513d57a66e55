fn main() {
    std::process::exit(sparsesoup_harness::run_cli(std::env::args_os()));
}
