use clap::Parser;
use flowtraj_cli::{run, Cli, EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE};

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_CHECK_FAILED,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    };
    std::process::exit(code);
}
