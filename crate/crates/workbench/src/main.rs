fn main() {
    std::process::exit(robustedit_workbench::run_cli(std::env::args_os()));
}
