fn main() {
    if let Err(e) = oqat_cli::run(std::env::args_os()) {
        let msg = e.to_string();
        if !msg.is_empty() {
            eprintln!("error: {msg}");
        }
        std::process::exit(e.exit_code());
    }
}
