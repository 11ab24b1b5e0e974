fn main() {
    std::process::exit(extinction::cli::main_with(std::env::args_os()));
}
