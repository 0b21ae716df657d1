use clap::Parser;
use figedit::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("figedit: {e}");
        std::process::exit(e.exit_code());
    }
}
