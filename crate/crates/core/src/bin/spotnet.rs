fn main() -> std::process::ExitCode {
    spotnet::cli::main()
}
