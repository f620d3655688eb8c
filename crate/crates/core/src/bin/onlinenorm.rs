fn main() {
    std::process::exit(onlinenorm::run_cli(std::env::args_os()));
}
