use std::process::ExitCode;

use zsd_align::config::SEED_ENV;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let seed = std::env::var(SEED_ENV).ok();
    ExitCode::from(zsd_align::main_with(std::env::args_os(), seed.as_deref()))
}
