fn main() {
    std::process::exit(mltx::cli::main_entry());
}
