use fedemoji::cli;

fn main() {
    std::process::exit(cli::run());
}
