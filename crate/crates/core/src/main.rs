fn main() -> std::process::ExitCode {
    fckan::cli::run()
}
