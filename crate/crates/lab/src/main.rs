fn main() {
    std::process::exit(esc_lab::run(std::env::args_os()));
}
