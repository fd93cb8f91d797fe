fn main() {
    std::process::exit(tfn::cli::main_entry());
}
