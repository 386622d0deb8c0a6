fn main() {
    std::process::exit(prefgame::cli::main_entry());
}
