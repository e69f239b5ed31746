fn main() -> std::process::ExitCode {
    birotate_cli::main_with_args(std::env::args_os())
}
