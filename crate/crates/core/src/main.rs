fn main() -> std::process::ExitCode {
    nmpose::cli::main_with_args(std::env::args_os().collect())
}
