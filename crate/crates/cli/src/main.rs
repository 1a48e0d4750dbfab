fn main() {
    std::process::exit(mpath_cli::run(std::env::args_os()));
}
