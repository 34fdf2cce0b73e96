use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let stdout = io::stdout();
    let code = iwpost::cli::run(&args, &mut stdout.lock(), &mut io::stderr());
    ExitCode::from(code)
}
