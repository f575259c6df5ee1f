fn main() -> std::process::ExitCode {
    prompt_ot::cli::main()
}
