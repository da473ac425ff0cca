use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = rgbd_consist_cli::Cli::parse();
    let result = rgbd_consist_cli::configure_threads().and_then(|()| rgbd_consist_cli::run(cli));
    if let Err(e) = result {
        eprintln!("{}", e.line());
        std::process::exit(e.exit_code());
    }
}
