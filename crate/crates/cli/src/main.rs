fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(bmds_cli::cli_dispatch(&args));
}
