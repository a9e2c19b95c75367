fn main() {
    std::process::exit(mdm_lab::cli::run(std::env::args_os()));
}
