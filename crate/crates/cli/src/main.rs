use clap::Parser;

use adrsim_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            println!(
                "{}: {} artifacts in {}",
                report.subcommand,
                report.artifacts.len(),
                report.out_dir
            );
            println!("{}", serde_json::to_string_pretty(&report.summary).unwrap());
        }
        Err(err) => {
            eprintln!("{err}");
            std::process::exit(err.exit_code());
        }
    }
}
