use clap::Parser;

fn main() {
    let cli = ncd_cli::Cli::parse();
    std::process::exit(ncd_cli::run(cli));
}
