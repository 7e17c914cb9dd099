use clap::Parser;

fn main() {
    let cli = sigcca::cli::Cli::parse();
    if let Err(e) = sigcca::cli::run(cli) {
        let msg = format!("{e:#}").replace('\n', " ");
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}
