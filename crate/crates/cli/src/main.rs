fn main() {
    std::process::exit(spark_cli::main_with_args(std::env::args_os()));
}
