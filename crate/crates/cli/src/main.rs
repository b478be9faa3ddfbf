use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = panelpomp_cli::Cli::parse();
    match panelpomp_cli::run(&cli) {
        Ok(rec) => log::info!("{} finished in {:.2}s", rec.command, rec.wall_time_s),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
