fn main() -> std::process::ExitCode {
    embedlab::cli::main()
}
