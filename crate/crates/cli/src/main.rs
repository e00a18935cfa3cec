fn main() {
    std::process::exit(inpaint_cli::dispatch(std::env::args_os()));
}
