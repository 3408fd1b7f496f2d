fn main() {
    salrgb::cli::main()
}
