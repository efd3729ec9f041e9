fn main() {
    std::process::exit(fedsim::bench::cli_main(std::env::args_os()));
}
