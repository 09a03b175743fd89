use std::process::ExitCode;

fn main() -> ExitCode {
    match motion_instruct::cli::run_from(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(motion_instruct::cli::exit_code(&e) as u8)
        }
    }
}
