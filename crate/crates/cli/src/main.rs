fn main() {
    std::process::exit(steerlab::run(std::env::args_os()));
}
