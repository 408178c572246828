fn main() {
    std::process::exit(twostage::cli::run());
}
