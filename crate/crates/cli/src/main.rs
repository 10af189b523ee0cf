fn main() {
    std::process::exit(aisllm_cli::main_exit_code());
}
