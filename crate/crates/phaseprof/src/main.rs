fn main() -> std::process::ExitCode {
    phaseprof::cli::main()
}
