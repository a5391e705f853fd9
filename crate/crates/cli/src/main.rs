fn main() {
    eprintln!("dgforge: no command given; see `dgforge --help` once subcommands land");
    std::process::exit(1);
}
