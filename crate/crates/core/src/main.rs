fn main() {
    std::process::exit(cql::cli::dispatch(std::env::args_os()));
}
