fn main() {
    std::process::exit(mpgn_cli::run_from_env());
}
