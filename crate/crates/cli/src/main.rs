use clap::Parser;

fn main() {
    let cli = bounty_cli::Cli::parse();
    match bounty_cli::run(&cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("{}", e.to_json());
            std::process::exit(e.exit_code());
        }
    }
}
