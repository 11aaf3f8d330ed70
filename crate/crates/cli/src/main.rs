use clap::Parser;

fn main() {
    let cli = lorpman_cli::Cli::parse();
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    if let Err(e) = lorpman_cli::run(&cli, &mut lock) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
