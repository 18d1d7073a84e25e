//! `twinloop` command-line entry point.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use twinloop::discrepancy::detect_discrepancies;
use twinloop::scene::frames::{read_frame, write_frame};
use twinloop::scene::{add_depth_noise, render_rgbd, robot_body, SceneDescription};
use twinloop::tasks::report::summarize_trace;
use twinloop::tasks::{bandwidth_report, run_episode, Scenario};
use twinloop::twinsync::trace::parse_trace;
use twinloop::twinsync::Session;
use twinloop_gateway::{Controller, GatewayConfig};

#[derive(Parser)]
#[command(name = "twinloop", version, about = "Dual digital-twin teleoperation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario to completion; prints metrics as JSON and writes the trace.
    Run {
        scenario: PathBuf,
        /// Trace output (line-delimited JSON); defaults to `<scenario>.trace.jsonl`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the discrepancy detector on two frame pairs (`<base>.ppm` + `<base>.pgm`)
    /// and print the cloud as "x y z" lines.
    Discrepancy {
        real: PathBuf,
        synthetic: PathBuf,
        /// Scene file providing the camera; the default camera otherwise.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Write the cloud here instead of stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Render the real and synthetic camera frames of a scenario at its start.
    Render {
        scenario: PathBuf,
        real: PathBuf,
        synthetic: PathBuf,
    },
    /// Summarize a trace: traffic per channel, bandwidth comparison, deviation and audit.
    Report { trace: PathBuf },
    /// Serve a live session over WebSocket.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Virtual seconds per wall-clock second (0 = unthrottled).
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run { scenario, trace } => run(&scenario, trace),
        Command::Discrepancy {
            real,
            synthetic,
            scene,
            output,
        } => discrepancy(&real, &synthetic, scene.as_deref(), output.as_deref()),
        Command::Render {
            scenario,
            real,
            synthetic,
        } => render(&scenario, &real, &synthetic),
        Command::Report { trace } => report(&trace),
        Command::Serve { port, scenario, speed } => serve(port, scenario.as_deref(), speed),
    }
}

fn load(path: &Path) -> Result<Scenario> {
    Scenario::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(path: &Path, trace: Option<PathBuf>) -> Result<ExitCode> {
    let scenario = load(path)?;
    let episode = run_episode(&scenario)?;
    let trace_path = trace.unwrap_or_else(|| path.with_extension("trace.jsonl"));
    let file = File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?;
    episode.trace.write_to(BufWriter::new(file))?;
    let out = serde_json::json!({
        "scenario": scenario.name,
        "trace": trace_path,
        "metrics": episode.metrics,
        "bandwidth": bandwidth_report(&episode.metrics, &scenario.video),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    if !episode.metrics.complete {
        eprintln!("episode timed out after {:.3} s", episode.metrics.completion_time);
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn discrepancy(real: &Path, synthetic: &Path, scene: Option<&Path>, output: Option<&Path>) -> Result<ExitCode> {
    let desc = match scene {
        Some(p) => SceneDescription::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => SceneDescription::default(),
    };
    let real = read_frame(real).context("reading real frame")?;
    let synthetic = read_frame(synthetic).context("reading synthetic frame")?;
    let cloud = detect_discrepancies(&real, &synthetic, &desc.camera, &Default::default())?;
    match output {
        Some(p) => std::fs::write(p, cloud.to_xyz())?,
        None => io::stdout().lock().write_all(cloud.to_xyz().as_bytes())?,
    }
    eprintln!("{} points", cloud.len());
    Ok(ExitCode::SUCCESS)
}

fn render(path: &Path, real_base: &Path, synthetic_base: &Path) -> Result<ExitCode> {
    let scenario = load(path)?;
    let session = Session::new(scenario.session.clone())?;
    let cfg = session.config();
    let cam = &cfg.scene.camera;
    let real = add_depth_noise(
        &render_rgbd(&session.real_scene(), cam, cfg.scene.background),
        cfg.sensing.depth_noise,
        cfg.sensing.dropout,
        cfg.seed,
    );
    let mut modeled = cfg.environment.clone();
    modeled.extend(robot_body(&cfg.arm, &session.robot().joints));
    let synthetic = render_rgbd(&modeled, cam, cfg.scene.background);
    write_frame(real_base, &real)?;
    write_frame(synthetic_base, &synthetic)?;
    Ok(ExitCode::SUCCESS)
}

fn report(path: &Path) -> Result<ExitCode> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let events = parse_trace(&text).map_err(anyhow::Error::msg)?;
    let s = summarize_trace(&events);
    let mut out = io::stdout().lock();
    writeln!(out, "scenario   {}", s.scenario_name.as_deref().unwrap_or("-"))?;
    writeln!(out, "seed       {}", s.seed.map_or("-".into(), |v| v.to_string()))?;
    writeln!(out, "duration   {:.3} s", s.last_t_us as f64 / 1e6)?;
    writeln!(out)?;
    writeln!(out, "{:<10} {:>10} {:>14} {:>8}", "channel", "packets", "bytes", "dropped")?;
    for (name, t) in [
        ("pose", s.pose),
        ("object", s.object),
        ("cloud", s.cloud),
        ("command", s.command),
        ("injected", s.injected),
    ] {
        writeln!(out, "{name:<10} {:>10} {:>14} {:>8}", t.packets, t.bytes, t.dropped)?;
    }
    if let Some(m) = &s.metrics {
        let video = serde_json::from_value::<Scenario>(
            events
                .iter()
                .find_map(|e| match e {
                    twinloop::twinsync::trace::TraceEvent::Header { scenario, .. } => Some(scenario.clone()),
                    _ => None,
                })
                .unwrap_or_default(),
        )
        .map(|sc| sc.video)
        .unwrap_or_default();
        let b = bandwidth_report(m, &video);
        writeln!(out)?;
        writeln!(
            out,
            "video      {:>10} {:>14}   (emulated, {} fps x {} x {} B)",
            b.video_packets, b.video_bytes, video.frame_rate, video.packets_per_frame, video.packet_size
        )?;
        let ratio = |r: Option<f64>| r.map_or("-".to_string(), |r| format!("{r:.1}x"));
        writeln!(
            out,
            "ratio      {:>10} {:>14}   (video / object datagrams)",
            ratio(b.packet_ratio),
            ratio(b.byte_ratio)
        )?;
        writeln!(out)?;
        writeln!(out, "complete   {}", m.complete)?;
        writeln!(out, "time       {:.3} s", m.completion_time)?;
        if let Some(d) = &m.deviation {
            writeln!(
                out,
                "deviation  mean {:.3} mm, max {:.3} mm, {} excursions",
                d.mean * 1e3,
                d.max * 1e3,
                d.excursions
            )?;
        }
        writeln!(out, "force max  {:.3} N", m.max_force)?;
        match s.accounting_matches() {
            Some(true) => writeln!(out, "accounting tx records match reported counters")?,
            _ => writeln!(out, "accounting MISMATCH between tx records and reported counters")?,
        }
    }
    writeln!(out)?;
    writeln!(out, "vetoes     dt1 {}, dt2 {}", s.dt1_vetoes, s.dt2_vetoes)?;
    writeln!(out, "rx errors  {}", s.rx_errors)?;
    writeln!(
        out,
        "fence      {} of {} recorded robot states outside (max violation {:.3e} m)",
        s.robot_outside, s.states, s.max_violation
    )?;
    if s.robot_outside > 0 {
        bail!("robot left the geofence");
    }
    Ok(ExitCode::SUCCESS)
}

fn serve(port: u16, scenario: Option<&Path>, speed: f64) -> Result<ExitCode> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let scenario = match scenario {
        Some(p) => load(p)?,
        None => Scenario::default(),
    };
    let controller = Controller::new(scenario)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
        let handle = twinloop_gateway::spawn(
            controller,
            listener,
            GatewayConfig {
                speed,
                ..GatewayConfig::default()
            },
        )
        .await?;
        tracing::info!("serving ws://{}/ws", handle.addr);
        tokio::signal::ctrl_c().await?;
        handle.shutdown().await;
        anyhow::Ok(())
    })?;
    Ok(ExitCode::SUCCESS)
}
