fn main() {
    let mut out = std::io::stdout();
    let mut err = std::io::stderr();
    std::process::exit(vialflow::cli::run(std::env::args_os(), &mut out, &mut err));
}
