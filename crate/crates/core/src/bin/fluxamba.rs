fn main() {
    let code = fluxamba::cli::main_with_args(std::env::args().collect(), &mut std::io::stdout().lock());
    std::process::exit(code);
}
