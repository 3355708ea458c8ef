use clap::Parser;

use semloc::cli::{run, CliArgs};

fn main() {
    let args = CliArgs::parse();
    let json_errors = args.json_errors;
    match run(args) {
        Ok(()) => {}
        Err(err) => {
            if json_errors {
                eprintln!("{}", err.to_json());
            } else {
                eprintln!("error: {err}");
            }
            std::process::exit(err.kind.exit_code());
        }
    }
}
