fn main() {
    std::process::exit(cbflab::cli_main());
}
