fn main() -> std::process::ExitCode {
    wpg_cli::cli::main()
}
