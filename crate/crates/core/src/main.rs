use std::process::ExitCode;

use symmem::cli;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match cli::parse(std::env::args_os()) {
        Ok(cfg) => cli::run(&cfg),
        Err(e) => {
            if e.exit_code() == cli::EXIT_OK {
                println!("{e}");
            } else {
                eprintln!("{e}");
            }
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
