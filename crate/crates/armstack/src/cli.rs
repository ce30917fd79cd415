//! Command-line front end. Exit codes: 0 ok, 2 configuration, 3 transport
//! or connection, 4 motion.

use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use armstack_core::kinematics::workspace_envelope;
use armstack_core::robot_model::RobotDescription;
use armstack_core::servo_sim::VirtualBus;
use armstack_core::transport::{SimTransport, Transport};
use clap::{Args, Parser, Subcommand};
use futures_util::{SinkExt, StreamExt};
use thiserror::Error;
use tokio_tungstenite::tungstenite::Message;

use crate::controller::{home_configuration, Controller, StartError};
use crate::description::load_or_default;
use crate::script::{self, LineReport};
use crate::serial::SerialTransport;
use crate::service::{self, ControlLoop, DEFAULT_BIND};
use crate::wire::{Command, ErrorCode, Mode, RobotState, ServerMessage};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_TRANSPORT: u8 = 3;
pub const EXIT_MOTION: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "armstack", version, about = "Desk-arm control stack")]
pub struct Cli {
    /// Robot description file (TOML); the shipped default when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub description: Option<PathBuf>,

    /// More log output on stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run the teleoperation service.
    Serve(ServeArgs),
    /// Jog the arm from the keyboard through a running service.
    Jog(JogArgs),
    /// Motion scripts.
    #[command(subcommand)]
    Script(ScriptCmd),
    /// Print the reachable workspace extents of the description.
    Envelope {
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
}

#[derive(Debug, Args)]
#[group(id = "transport", multiple = false)]
pub struct TransportArgs {
    /// Use the built-in servo simulator.
    #[arg(long)]
    pub sim: bool,
    /// Serial device of the servo chain.
    #[arg(long, value_name = "PATH")]
    pub serial: Option<String>,
    /// Serial baud rate; defaults to the description's bus setting.
    #[arg(long)]
    pub baud: Option<u32>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub transport: TransportArgs,
    #[arg(long, env = "ARMSTACK_BIND", default_value = DEFAULT_BIND)]
    pub bind: String,
    /// Directory served under /ui.
    #[arg(long, value_name = "DIR")]
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct JogArgs {
    #[arg(long, default_value = "ws://127.0.0.1:8700/ws")]
    pub connect: String,
    /// Ticks per key press.
    #[arg(long, default_value_t = 20)]
    pub step: i32,
    /// One JSON object per line on stdout.
    #[arg(long)]
    pub porcelain: bool,
}

#[derive(Debug, Subcommand)]
pub enum ScriptCmd {
    /// Execute a motion script.
    Run(ScriptRunArgs),
}

#[derive(Debug, Args)]
pub struct ScriptRunArgs {
    pub file: PathBuf,
    #[command(flatten)]
    pub transport: TransportArgs,
    /// Plan every line and print durations without moving anything.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub porcelain: bool,
    /// Write every published state as one JSON line.
    #[arg(long, value_name = "FILE")]
    pub state_log: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Transport(String),
    #[error("{0}")]
    Motion(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Transport(_) => EXIT_TRANSPORT,
            CliError::Motion(_) => EXIT_MOTION,
        }
    }
}

impl From<StartError> for CliError {
    fn from(e: StartError) -> Self {
        CliError::Transport(format!("servo bus: {e}"))
    }
}

type BoxTransport = Box<dyn Transport + Send>;

fn open_transport(t: &TransportArgs, d: &RobotDescription) -> Result<BoxTransport, CliError> {
    if t.sim {
        let bus = VirtualBus::from_description(d).map_err(|e| CliError::Config(e.to_string()))?;
        return Ok(Box::new(SimTransport::new(bus)));
    }
    match &t.serial {
        Some(path) => {
            let baud = t.baud.unwrap_or(d.bus.baud);
            let port = SerialTransport::open(path, baud)
                .map_err(|e| CliError::Transport(e.to_string()))?;
            Ok(Box::new(port))
        }
        None => Err(CliError::Config(
            "choose a transport: --sim or --serial <PATH>".into(),
        )),
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime")
}

pub fn main_with(cli: Cli) -> ExitCode {
    let filter = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(filter)),
        )
        .try_init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("armstack: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let desc = load_or_default(cli.description.as_deref())
        .map_err(|e| CliError::Config(description_error(cli.description.as_deref(), e)))?;
    match cli.command {
        Cmd::Serve(args) => cmd_serve(args, desc),
        Cmd::Jog(args) => runtime().block_on(cmd_jog(args, desc)),
        Cmd::Script(ScriptCmd::Run(args)) => cmd_script_run(args, desc),
        Cmd::Envelope { samples } => {
            let e =
                workspace_envelope(&desc, samples).map_err(|e| CliError::Config(e.to_string()))?;
            println!("max horizontal radius  {:.4} m", e.max_horizontal_radius);
            println!("max tool height        {:.4} m", e.max_tool_height);
            println!("min tool height        {:.4} m", e.min_tool_height);
            println!("vertical travel        {:.4} m", e.vertical_travel());
            Ok(())
        }
    }
}

fn description_error(path: Option<&Path>, e: crate::description::DescriptionError) -> String {
    match path {
        Some(p) => format!("{}: {e}", p.display()),
        None => format!("built-in description: {e}"),
    }
}

fn cmd_serve(args: ServeArgs, desc: RobotDescription) -> Result<(), CliError> {
    let addr: SocketAddr = args
        .bind
        .parse()
        .map_err(|_| CliError::Config(format!("bad bind address {:?}", args.bind)))?;
    if !args.transport.sim && args.transport.serial.is_none() {
        return Err(CliError::Config(
            "serve needs a transport: --sim or --serial <PATH>".into(),
        ));
    }
    let transport = open_transport(&args.transport, &desc)?;
    let rate = desc.bus.loop_rate_hz;
    let controller = Controller::start(desc, transport)?;
    runtime().block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Transport(format!("bind {addr}: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| CliError::Transport(e.to_string()))?;
        println!("listening on {local}");
        let _ = std::io::stdout().flush();
        let control = ControlLoop::spawn(controller, rate);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        let served = service::serve(listener, control.handle(), args.ui_dir, shutdown).await;
        control.shutdown();
        served.map_err(|e| CliError::Transport(e.to_string()))
    })
}

fn state_line(s: &RobotState) -> String {
    format!(
        "seq {:>6}  {:<10}  x {:+.4}  y {:+.4}  z {:+.4}  pitch {:+.3}  w {:.4}  ticks {:?}",
        s.seq,
        format!("{:?}", s.mode).to_lowercase(),
        s.pose.x,
        s.pose.y,
        s.pose.z,
        s.pose.pitch,
        s.w,
        s.ticks
    )
}

async fn cmd_jog(args: JogArgs, desc: RobotDescription) -> Result<(), CliError> {
    use tokio::io::AsyncReadExt;

    let (ws, _) = tokio_tungstenite::connect_async(args.connect.as_str())
        .await
        .map_err(|e| CliError::Transport(format!("{}: {e}", args.connect)))?;
    let (mut tx, mut rx) = ws.split();
    let (key_tx, mut keys) = tokio::sync::mpsc::channel::<u8>(64);
    tokio::spawn(async move {
        let mut stdin = tokio::io::stdin();
        let mut buf = [0u8; 64];
        while let Ok(n) = stdin.read(&mut buf).await {
            if n == 0 {
                break;
            }
            for &b in &buf[..n] {
                if key_tx.send(b).await.is_err() {
                    return;
                }
            }
        }
    });
    if !args.porcelain {
        eprintln!("keys: 1-5 select motor, + / - jog, g / G close / open gripper, q quit");
    }

    let mut printer = StatePrinter::new(args.porcelain);
    let mut joint = 1u8;
    let mut last_seq = None;
    loop {
        tokio::select! {
            key = keys.recv() => {
                let cmd = match key {
                    None | Some(b'q') => break,
                    Some(k @ b'1'..=b'5') => {
                        joint = k - b'0';
                        continue;
                    }
                    Some(b'+' | b'=') => Command::Jog { joint, delta_ticks: args.step },
                    Some(b'-' | b'_') => Command::Jog { joint, delta_ticks: -args.step },
                    Some(b'g') => Command::Gripper { width_m: desc.gripper.width_closed_m },
                    Some(b'G') => Command::Gripper { width_m: desc.gripper.width_open_m },
                    Some(k) if k.is_ascii_whitespace() => continue,
                    Some(k) => {
                        eprintln!("ignored key {:?}", k as char);
                        continue;
                    }
                };
                tx.send(Message::Text(cmd.to_json().to_string().into()))
                    .await
                    .map_err(|e| CliError::Transport(e.to_string()))?;
                // sequential: wait for this command's ack before the next key
                loop {
                    match next_message(&mut rx).await? {
                        ServerMessage::Ack(a) => {
                            printer.ack(&a);
                            if let Some(s) = a.seq {
                                last_seq = Some(s);
                            }
                            break;
                        }
                        ServerMessage::State(s) => printer.state(&s),
                    }
                }
            }
            msg = next_message(&mut rx) => match msg? {
                ServerMessage::State(s) => printer.state(&s),
                ServerMessage::Ack(a) => printer.ack(&a),
            }
        }
    }
    // let the last jog finish so the final line shows where the arm ended up
    if let Some(seq) = last_seq {
        let settle = async {
            loop {
                if let ServerMessage::State(s) = next_message(&mut rx).await? {
                    printer.state(&s);
                    if s.cmd_seq >= seq && s.mode == Mode::Idle {
                        return Ok::<_, CliError>(s);
                    }
                }
            }
        };
        let s = tokio::time::timeout(Duration::from_secs(10), settle)
            .await
            .map_err(|_| CliError::Motion("arm did not settle".into()))??;
        printer.finish(&s);
    }
    let _ = tx.send(Message::Close(None)).await;
    Ok(())
}

async fn next_message<S>(rx: &mut S) -> Result<ServerMessage, CliError>
where
    S: futures_util::Stream<Item = Result<Message, tokio_tungstenite::tungstenite::Error>> + Unpin,
{
    loop {
        match rx.next().await {
            Some(Ok(Message::Text(t))) => {
                return serde_json::from_str(t.as_str())
                    .map_err(|e| CliError::Transport(format!("bad message from service: {e}")))
            }
            Some(Ok(Message::Close(_))) | None => {
                return Err(CliError::Transport("service closed the connection".into()))
            }
            Some(Ok(_)) => continue,
            Some(Err(e)) => return Err(CliError::Transport(e.to_string())),
        }
    }
}

/// Prints states only when something visible changed.
struct StatePrinter {
    porcelain: bool,
    last: Option<([i32; 5], Mode)>,
}

impl StatePrinter {
    fn new(porcelain: bool) -> Self {
        Self {
            porcelain,
            last: None,
        }
    }

    fn state(&mut self, s: &RobotState) {
        let key = (s.ticks, s.mode);
        if self.last == Some(key) {
            return;
        }
        self.last = Some(key);
        self.emit(s);
    }

    fn finish(&mut self, s: &RobotState) {
        if self.last != Some((s.ticks, s.mode)) {
            self.emit(s);
        }
    }

    fn emit(&self, s: &RobotState) {
        if self.porcelain {
            println!("{}", ServerMessage::State(s.clone()).to_text());
        } else {
            println!("{}", state_line(s));
        }
    }

    fn ack(&self, a: &crate::wire::Ack) {
        if self.porcelain {
            println!("{}", ServerMessage::Ack(a.clone()).to_text());
        } else if !a.ok {
            eprintln!(
                "rejected: {} {}",
                a.code.map_or("?", ErrorCode::as_str),
                a.message.as_deref().unwrap_or("")
            );
        }
    }
}

fn print_report(r: &LineReport, porcelain: bool) {
    if porcelain {
        println!("{}", serde_json::to_string(r).expect("report serializes"));
        return;
    }
    let mut line = format!("line {:>3}  {:<12} {:>7.3} s", r.line, r.kind, r.duration_s);
    if let Some(err) = r.error_m {
        line.push_str(&format!("  reached within {:.2} mm", err * 1000.0));
    }
    println!("{line}");
}

fn cmd_script_run(args: ScriptRunArgs, desc: RobotDescription) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.file)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.file.display())))?;
    let lines = script::parse_script(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.file.display())))?;
    let motion_error = |f: script::ScriptFailure| {
        let msg = format!("{}: {f}", args.file.display());
        if f.rejection.code == ErrorCode::Fault {
            CliError::Transport(msg)
        } else {
            CliError::Motion(msg)
        }
    };

    if args.dry_run {
        let reports =
            script::dry_run(&lines, &desc, home_configuration(&desc)).map_err(motion_error)?;
        for r in &reports {
            print_report(r, args.porcelain);
        }
        let total: f64 = reports.iter().map(|r| r.duration_s).sum();
        if args.porcelain {
            println!(
                "{}",
                serde_json::json!({ "total_duration_s": total, "commands_sent": 0 })
            );
        } else {
            println!("total {total:.3} s (dry run, nothing sent)");
        }
        return Ok(());
    }

    let realtime = !args.transport.sim;
    let transport = open_transport(&args.transport, &desc)?;
    let rate = desc.bus.loop_rate_hz;
    let mut controller = Controller::start(desc, transport)?;
    let mut log = match &args.state_log {
        Some(p) => {
            Some(BufWriter::new(File::create(p).map_err(|e| {
                CliError::Config(format!("{}: {e}", p.display()))
            })?))
        }
        None => None,
    };
    let mut log_error = None;
    let period = Duration::from_secs_f64(1.0 / rate);
    let result = script::run(
        &mut controller,
        &lines,
        rate,
        |s| {
            if let Some(w) = log.as_mut() {
                if let Err(e) = serde_json::to_writer(&mut *w, s)
                    .map_err(std::io::Error::from)
                    .and_then(|_| w.write_all(b"\n"))
                {
                    log_error.get_or_insert(e);
                }
            }
            if realtime {
                std::thread::sleep(period);
            }
        },
        |r| print_report(r, args.porcelain),
    );
    if let Some(mut w) = log {
        w.flush()
            .map_err(|e| CliError::Config(format!("state log: {e}")))?;
    }
    if let Some(e) = log_error {
        return Err(CliError::Config(format!("state log: {e}")));
    }
    let reports = result.map_err(motion_error)?;
    let total: f64 = reports.iter().map(|r| r.duration_s).sum();
    let worst = reports
        .iter()
        .filter_map(|r| r.error_m)
        .fold(0.0f64, f64::max);
    if args.porcelain {
        println!(
            "{}",
            serde_json::json!({ "total_duration_s": total, "max_waypoint_error_m": worst })
        );
    } else {
        println!(
            "done: {total:.3} s of motion, worst waypoint error {:.3} mm",
            worst * 1000.0
        );
    }
    Ok(())
}
