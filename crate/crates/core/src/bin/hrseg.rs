fn main() -> std::process::ExitCode {
    hrseg::cli::run(std::env::args_os())
}
