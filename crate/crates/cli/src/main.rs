fn main() {
    crossmask::tune_allocator();
    std::process::exit(crossmask_cli::run(std::env::args_os()));
}
