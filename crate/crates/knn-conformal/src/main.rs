fn main() {
    std::process::exit(knn_conformal::cli::run(std::env::args_os()));
}
