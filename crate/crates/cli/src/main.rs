use clap::Parser;

fn main() {
    let cli = moemix_cli::Cli::parse();
    std::process::exit(moemix_cli::main_with(cli));
}
