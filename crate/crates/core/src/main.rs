fn main() -> std::process::ExitCode {
    layer_inject::cli::main()
}
