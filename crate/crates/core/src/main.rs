use clap::Parser;

fn main() {
    let cli = wstal::cli::Cli::parse();
    if let Err(e) = wstal::cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
