use clap::Parser;
use dlm_workbench::cli::Cli;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dlm_workbench::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
