use clap::Parser;
use mint::cli::Cli;
use mint::error::{CliError, EXIT_USAGE};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let err = CliError::Usage(e.to_string().lines().next().unwrap_or("").to_string());
            eprintln!("{}", err.to_line());
            std::process::exit(EXIT_USAGE);
        }
        Err(e) => {
            print!("{e}");
            return;
        }
    };
    match mint::run(cli) {
        Ok(Some(summary)) => println!("{summary}"),
        Ok(None) => {}
        Err(e) => {
            eprintln!("{}", e.to_line());
            std::process::exit(e.exit_code());
        }
    }
}
