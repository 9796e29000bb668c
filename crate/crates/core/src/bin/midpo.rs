fn main() {
    let outcome = midpo::cli::run(std::env::args_os());
    std::process::exit(outcome.exit_code);
}
