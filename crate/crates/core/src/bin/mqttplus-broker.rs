use std::process::ExitCode;

use clap::Parser;
use mqttplus::config::{load_config, CliArgs};
use mqttplus::server::{shutdown_signal, Server};

fn main() -> ExitCode {
    let args = CliArgs::parse();
    let config = match load_config(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("mqttplus-broker: {e}");
            return ExitCode::from(2);
        }
    };
    mqttplus::logging::init(config.log_level);
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("mqttplus-broker: cannot start runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    let result = runtime.block_on(async {
        let shutdown = shutdown_signal();
        let server = Server::bind(config).await?;
        server.run(shutdown).await
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!(target: "fatal", "{e}");
            log::logger().flush();
            ExitCode::FAILURE
        }
    }
}
