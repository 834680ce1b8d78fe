use clap::Parser;

fn main() {
    let cli = visprune_cli::Cli::parse();
    match visprune_cli::run(cli) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
