use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mqttplus_bench::report::{emit_report, evaluate};
use mqttplus_bench::scenario::{Mode, PayloadKind, Rate, ScenarioConfig};
use mqttplus_bench::{run_scenario, BenchError, ReportRow};

/// Measure broker downlink traffic against the analytical model.
#[derive(Debug, Parser)]
#[command(name = "mqttplus-bench", version)]
struct Args {
    #[arg(long, value_enum, default_value = "mqttplus-skr")]
    mode: Mode,
    /// Publishing sensors.
    #[arg(long, default_value_t = 4)]
    m: usize,
    /// Subscribers.
    #[arg(long, default_value_t = 2)]
    n: usize,
    /// Publishes per second per sensor, e.g. `1` or `1/20`.
    #[arg(long, default_value = "1")]
    lambda: Rate,
    /// Aggregate publications per second, e.g. `1/15`.
    #[arg(long = "lambda-a", default_value = "1/15")]
    lambda_a: Rate,
    /// Virtual seconds.
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    /// Image payload size in bytes; implies image payloads.
    #[arg(long = "image-size")]
    image_size: Option<usize>,
    /// Run m = 1..=M and n = 1..=N instead of a single scenario.
    #[arg(long)]
    sweep: bool,
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
}

fn scenarios(args: &Args) -> Vec<ScenarioConfig> {
    let one = |m, n| {
        let mut c = ScenarioConfig::new(args.mode, m, n);
        c.lambda = args.lambda.0;
        c.lambda_a = args.lambda_a.0;
        c.duration = args.duration;
        if let Some(size) = args.image_size {
            c.payload = PayloadKind::Image { size };
        }
        c
    };
    if args.sweep {
        (1..=args.n).flat_map(|n| (1..=args.m).map(move |m| (m, n))).map(|(m, n)| one(m, n)).collect()
    } else {
        vec![one(args.m, args.n)]
    }
}

async fn run(args: &Args) -> Result<bool, BenchError> {
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut all_ok = true;
    for config in scenarios(args) {
        let measurement = run_scenario(&config).await?;
        let (_, _, row) = evaluate(&config, &measurement);
        println!("{} wall={:.2}s", row.summary(), measurement.wall_time.as_secs_f64());
        if measurement.count_mismatches > 0 {
            println!("FAIL {} processed counts differ from planted markers", measurement.count_mismatches);
            all_ok = false;
        }
        all_ok &= row.within_tolerance();
        rows.push(row);
    }
    emit_report(&rows, File::create(&args.out)?)?;
    Ok(all_ok)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("mqttplus-bench: cannot start runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    match runtime.block_on(run(&args)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("mqttplus-bench: {e}");
            ExitCode::from(2)
        }
    }
}
