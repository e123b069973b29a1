use clap::Parser;

fn main() {
    if let Err(e) = twobp_cli::run(twobp_cli::Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
