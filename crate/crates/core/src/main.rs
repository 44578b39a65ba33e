fn main() {
    std::process::exit(picmdp::cli::run(std::env::args_os()));
}
