use clap::Parser;
use transducer_cli::{commands, Cli};

fn main() {
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(summary) => print!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
