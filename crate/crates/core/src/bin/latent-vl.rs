fn main() {
    std::process::exit(latent_vl::cli::main_with(std::env::args_os()));
}
