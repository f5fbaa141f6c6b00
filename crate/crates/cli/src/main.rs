use std::process::ExitCode;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    match semsplat_cli::run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = semsplat_cli::exit_code(&e);
            if code == semsplat_cli::EXIT_USAGE {
                eprintln!("{e}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(code)
        }
    }
}
