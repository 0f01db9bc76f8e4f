fn main() {
    std::process::exit(wmaploc::harness::cli::main_entry());
}
