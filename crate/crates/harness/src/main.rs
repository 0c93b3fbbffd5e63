fn main() {
    let code = moeulab_harness::cli::main_with(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
