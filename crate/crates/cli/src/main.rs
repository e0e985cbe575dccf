use clap::Parser;

fn main() {
    let cli = longhorn_cli::Cli::parse();
    if let Err(e) = longhorn_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
