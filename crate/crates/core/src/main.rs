fn main() {
    std::process::exit(wx_harness::cli::dispatch(std::env::args_os()));
}
