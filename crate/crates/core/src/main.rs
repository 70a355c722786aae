fn main() {
    std::process::exit(qecontrast::cli::run(std::env::args_os()));
}
