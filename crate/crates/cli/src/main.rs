fn main() -> std::process::ExitCode {
    acuity_cli::run(std::env::args_os())
}
