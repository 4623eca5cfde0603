fn main() {
    std::process::exit(vags::cli::main(std::env::args_os()));
}
