//! Experiment CLI: dataset preparation, single runs, sweeps, reports, and a
//! small multi-connection secure-aggregation demo over local TCP.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fairfed_core::harness::{
    self, HarnessError, RunConfig, SweepSpec,
};
use fairfed_core::secagg::{
    decode_frame, encode_frame, FixedPointCodec, SecaggSession,
};

#[derive(Parser)]
#[command(name = "fairfed", version, about = "Fairness-aware federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prepare a dataset cache and print its census.
    Prepare {
        /// Builtin generator (adult-synth, compas-synth) or a CSV path.
        dataset: String,
        /// Schema JSON; required for CSV datasets.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Rows for builtin generators.
        #[arg(long, default_value_t = 6000)]
        rows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cache directory.
        #[arg(long, default_value = "out/prepared")]
        out: PathBuf,
    },
    /// Run one experiment config and print its summary record.
    Run {
        config: PathBuf,
        /// Rerun even if this config's artifacts already exist.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a sweep spec: grid cells x seeds, parallel, cached, CSV outputs.
    Sweep {
        spec: PathBuf,
        /// Worker threads (default: all cores).
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        force: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Aggregate the run records under a directory into report.md and CSVs.
    Report { dir: PathBuf },
    /// Secure-aggregation demo: client threads send masked frames over TCP,
    /// the server learns only the sum.
    SecaggDemo {
        #[arg(long, default_value_t = 4)]
        clients: u16,
        #[arg(long, default_value_t = 3)]
        elements: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("bad JSON in {}: {e}", path.display()))
}

fn secagg_demo(clients: u16, elements: usize, seed: u64) -> Result<(), String> {
    if clients == 0 {
        return Err("need at least one client".to_string());
    }
    let listener =
        TcpListener::bind("127.0.0.1:0").map_err(|e| format!("cannot bind: {e}"))?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    println!("server listening on {addr}; {clients} clients, {elements} elements each");

    let codec = FixedPointCodec::default();
    let round_tag = 1u32;
    // Every party derives the same pairwise masks from the shared seed.
    let session = SecaggSession::new(seed, clients as usize).map_err(|e| e.to_string())?;

    let mut handles = Vec::new();
    for client in 0..clients {
        let session = session.clone();
        handles.push(std::thread::spawn(move || -> Result<Vec<f64>, String> {
            let values: Vec<f64> = (0..elements)
                .map(|j| (client as f64 + 1.0) * 0.5 + j as f64 * 0.25)
                .collect();
            let (share, _) = session
                .mask(&values, client, round_tag, &codec)
                .map_err(|e| e.to_string())?;
            let frame = encode_frame(&share);
            let mut stream =
                TcpStream::connect(addr).map_err(|e| format!("client {client}: {e}"))?;
            stream
                .write_all(&(frame.len() as u32).to_le_bytes())
                .and_then(|_| stream.write_all(&frame))
                .map_err(|e| format!("client {client}: {e}"))?;
            Ok(values)
        }));
    }

    let mut shares = Vec::with_capacity(clients as usize);
    for _ in 0..clients {
        let (mut stream, _) = listener.accept().map_err(|e| e.to_string())?;
        let mut len_buf = [0u8; 4];
        stream.read_exact(&mut len_buf).map_err(|e| e.to_string())?;
        let mut frame = vec![0u8; u32::from_le_bytes(len_buf) as usize];
        stream.read_exact(&mut frame).map_err(|e| e.to_string())?;
        let (share, _) = decode_frame(&frame).map_err(|e| e.to_string())?;
        println!(
            "received client {} share, first element masked to {:#018x}",
            share.client,
            share.elements.first().copied().unwrap_or(0)
        );
        shares.push(share);
    }

    let mut expected = vec![0.0f64; elements];
    for handle in handles {
        let values = handle.join().map_err(|_| "client thread panicked")??;
        for (e, v) in expected.iter_mut().zip(&values) {
            *e += v;
        }
    }
    let sums = session
        .secure_sum(&shares, round_tag, &codec)
        .map_err(|e| e.to_string())?;
    println!("decoded sums:  {sums:?}");
    println!("plain sums:    {expected:?}");
    let max_err = sums
        .iter()
        .zip(&expected)
        .map(|(s, e)| (s - e).abs())
        .fold(0.0f64, f64::max);
    println!("max deviation: {max_err:.2e} (fixed-point quantization only)");
    Ok(())
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Prepare {
            dataset,
            schema,
            rows,
            seed,
            out,
        } => {
            let lines = harness::cmd_prepare(&dataset, schema.as_deref(), rows, seed, &out)
                .map_err(|e| e.to_string())?;
            for line in lines {
                println!("{line}");
            }
            Ok(())
        }
        Command::Run { config, force, out } => {
            let cfg: RunConfig = read_json(&config)?;
            let record = harness::run_cached(&cfg, &out, force).map_err(|e| e.to_string())?;
            println!("{}", harness::record_line(&record));
            println!("artifacts: {}", out.join(record.config_hash.clone()).display());
            Ok(())
        }
        Command::Sweep {
            spec,
            workers,
            force,
            out,
        } => {
            let spec: SweepSpec = read_json(&spec)?;
            if let Some(n) = workers {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| e.to_string())?;
            }
            let (result, written) =
                harness::cmd_sweep(&spec, &out, force).map_err(|e| e.to_string())?;
            println!(
                "{} cells aggregated, {} failures",
                result.cells.len(),
                result.failures.len()
            );
            for failure in &result.failures {
                eprintln!("failed: {failure}");
            }
            for path in written {
                println!("wrote {}", path.display());
            }
            if result.failures.is_empty() {
                Ok(())
            } else {
                Err("sweep finished with failures".to_string())
            }
        }
        Command::Report { dir } => {
            let md = harness::cmd_report(&dir).map_err(|e| match e {
                HarnessError::NoRuns(d) => format!("no runs found under {}", d.display()),
                other => other.to_string(),
            })?;
            print!("{md}");
            println!("wrote {}", dir.join("report.md").display());
            Ok(())
        }
        Command::SecaggDemo {
            clients,
            elements,
            seed,
        } => secagg_demo(clients, elements, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
