use clap::Parser;

fn main() {
    let cli = fos::cli::Cli::parse();
    if let Err(e) = fos::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
