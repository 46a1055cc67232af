use clap::Parser;

fn main() {
    let cli = modeground_cli::Cli::parse();
    if let Err(e) = modeground_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(modeground_cli::exit_code(&e));
    }
}
