fn main() -> std::process::ExitCode {
    yolite::cli::main()
}
