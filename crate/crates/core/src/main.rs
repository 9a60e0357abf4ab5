fn main() {
    std::process::exit(seqrelax::harness::cli::cli_main(std::env::args_os()));
}
