fn main() -> std::process::ExitCode {
    mmfl::cli::main()
}
