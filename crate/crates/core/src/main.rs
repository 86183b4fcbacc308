fn main() {
    std::process::exit(sevcl::cli::main_entry());
}
