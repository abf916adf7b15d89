fn main() -> std::process::ExitCode {
    gym_core::cli::main()
}
