fn main() {
    std::process::exit(ewsgcn::cli::run());
}
