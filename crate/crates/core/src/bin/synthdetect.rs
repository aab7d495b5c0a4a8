fn main() {
    let result = synthdetect::cli::run(std::env::args_os());
    if result.exit_code == 0 && !result.summary.is_empty() && result.summary != "help" {
        eprintln!("{}", result.summary);
    }
    std::process::exit(result.exit_code);
}
