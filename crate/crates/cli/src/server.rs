use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, ValueEnum};
use fedpipe::harness::ServerKind;
use fedpipe::metrics::{append_csv, MetricsRow};
use fedpipe::server::{Registration, RoundOutcome, ServerConfig, UdpServer};
use fedpipe::tcp::{params_to_le, TcpServer, TcpServerConfig};
use fedpipe::{AggregationMode, ChunkLayout, LossDirection, LossPolicy};

use crate::{usage, CliError};

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Direction {
    Inbound,
    Outbound,
    Both,
}

impl From<Direction> for LossDirection {
    fn from(d: Direction) -> Self {
        match d {
            Direction::Inbound => LossDirection::Inbound,
            Direction::Outbound => LossDirection::Outbound,
            Direction::Both => LossDirection::Both,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct ServerArgs {
    /// udp (pipelined) or tcp (thread per connection)
    #[arg(long, default_value = "udp")]
    pub transport: ServerKind,
    /// exact or approx
    #[arg(long, default_value = "exact")]
    pub mode: AggregationMode,
    #[arg(long, default_value_t = 10)]
    pub clients: usize,
    /// Worker lanes (UDP only).
    #[arg(long, default_value_t = 5)]
    pub workers: usize,
    /// Length of the parameter vector.
    #[arg(long, default_value_t = 330)]
    pub params: usize,
    #[arg(long, default_value = "127.0.0.1:0")]
    pub bind: SocketAddr,
    #[arg(long, default_value_t = 20)]
    pub rounds: usize,
    /// Seeded drop probability for the server socket (UDP only).
    #[arg(long, default_value_t = 0.0)]
    pub loss_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub loss_seed: u64,
    #[arg(long, value_enum, default_value = "inbound")]
    pub loss_direction: Direction,
    /// Expect clients on ports base..base+clients; ring ids follow port order.
    /// Without it clients are registered in order of their first START.
    #[arg(long)]
    pub client_base_port: Option<u16>,
    #[arg(long, default_value_t = 100)]
    pub retransmit_ms: u64,
    #[arg(long, default_value_t = 1000)]
    pub end_ack_window_ms: u64,
    /// Per-phase wait for clients before a round is abandoned.
    #[arg(long, default_value_t = 30)]
    pub deadline_s: u64,
    /// Append one metrics row per round here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    pub run_id: String,
    /// Write the last round's global vector here as little-endian f32.
    #[arg(long)]
    pub dump_global: Option<PathBuf>,
}

impl ServerArgs {
    fn validate(&self) -> Result<(), CliError> {
        if self.clients == 0 {
            return Err(usage("--clients must be at least 1"));
        }
        if self.clients > u16::MAX as usize {
            return Err(usage("--clients must fit a 16-bit counter"));
        }
        if self.workers == 0 {
            return Err(usage("--workers must be at least 1"));
        }
        if self.params == 0 {
            return Err(usage("--params must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(usage("--rounds must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return Err(usage("--loss-rate must lie in [0, 1]"));
        }
        if self.transport == ServerKind::TcpBaseline && self.loss_rate > 0.0 {
            return Err(usage("loss injection applies to the UDP transport only"));
        }
        if let Some(base) = self.client_base_port {
            if base == 0 || base as usize + self.clients > u16::MAX as usize + 1 {
                return Err(usage("--client-base-port range does not fit in the port space"));
            }
        }
        Ok(())
    }
}

fn report_round(args: &ServerArgs, round: usize, outcome: &RoundOutcome, num_chunks: usize) -> anyhow::Result<()> {
    let row = MetricsRow::from_report(&args.run_id, round as u32, &outcome.report, num_chunks);
    println!(
        "round {round}: receive {} us, compute {} us, send {} us, loss {:.2}%",
        row.receive_time_us.unwrap_or(0),
        row.compute_time_us.unwrap_or(0),
        row.send_time_us.unwrap_or(0),
        row.loss_pct.unwrap_or(0.0)
    );
    if let Some(path) = &args.csv {
        append_csv(path, &[row]).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn announce(addr: SocketAddr) {
    println!("listening on {addr}");
    let _ = std::io::stdout().flush();
}

pub fn run(args: ServerArgs) -> Result<(), CliError> {
    args.validate()?;
    let layout = ChunkLayout::with_default_capacity(args.params).map_err(|e| usage(e.to_string()))?;
    let deadline = Duration::from_secs(args.deadline_s);
    let mut last = None;
    match args.transport {
        ServerKind::UdpPipeline => {
            let mut cfg = ServerConfig::new(args.clients, args.workers, layout, args.mode);
            cfg.bind = args.bind;
            cfg.retransmit_interval = Duration::from_millis(args.retransmit_ms);
            cfg.end_ack_window = Duration::from_millis(args.end_ack_window_ms);
            cfg.client_deadline = deadline;
            if args.loss_rate > 0.0 {
                cfg.loss = LossPolicy::new(args.loss_rate, args.loss_seed, args.loss_direction.into());
            }
            if let Some(base) = args.client_base_port {
                cfg.registration = Registration::Static((0..args.clients).map(|k| base + k as u16).collect());
            }
            let mut server = UdpServer::bind(cfg).context("binding UDP server")?;
            announce(server.local().addr());
            for round in 0..args.rounds {
                let outcome = server.serve_round().with_context(|| format!("round {round}"))?;
                report_round(&args, round, &outcome, layout.num_chunks())?;
                last = Some(outcome);
            }
        }
        ServerKind::TcpBaseline => {
            let mut cfg = TcpServerConfig::new(args.clients, args.params, args.mode);
            cfg.bind = args.bind;
            cfg.deadline = deadline;
            let mut server = TcpServer::bind(cfg).context("binding TCP server")?;
            announce(server.local().context("local address")?);
            for round in 0..args.rounds {
                let outcome = server.serve_round().with_context(|| format!("round {round}"))?;
                report_round(&args, round, &outcome, layout.num_chunks())?;
                last = Some(outcome);
            }
        }
    }
    if let (Some(path), Some(outcome)) = (&args.dump_global, last) {
        std::fs::write(path, params_to_le(&outcome.global.values))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
