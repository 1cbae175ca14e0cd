use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use nalgebra::Vector3;

use relnav::akf::AdaptiveMode;
use relnav::attitude::Quaternion;
use relnav::icp::{icp_register, sample_model, Frame, IcpConfig, ModelSet, PointCloud, Pose};
use relnav::report::{self, Summary};
use relnav::sim::{self, Scenario};
use relnav::{io, mockup, Error, Result};

#[derive(Parser)]
#[command(name = "relnav", version, about = "Scan-matching relative navigation with an adaptive Kalman filter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = "RELNAV_OUT_DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write truth, IMU and scan files for a scenario.
    Simulate {
        scenario: PathBuf,
        #[command(flatten)]
        out: OutDir,
        /// Replicate index (selects the noise streams).
        #[arg(long, default_value_t = 0)]
        replicate: u64,
    },
    /// Closed-loop estimation; writes run.csv and prints a summary.
    Run {
        scenario: PathBuf,
        /// Filter overrides; keys may omit the `filter.` prefix.
        #[arg(long)]
        filter: Option<PathBuf>,
        #[command(flatten)]
        out: OutDir,
        /// Fixed noise covariance, no adaptation.
        #[arg(long)]
        no_adapt: bool,
        /// Monte Carlo replicates, run in parallel.
        #[arg(long, default_value_t = 1)]
        runs: usize,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Register a scan (XYZ) against a model (XYZ or ASCII STL).
    IcpAlign {
        scan: PathBuf,
        model: PathBuf,
        #[arg(long, default_value_t = 1e-8)]
        eps_th: f64,
        #[arg(long, default_value_t = 50)]
        i_max: usize,
        /// Initial pose `qx,qy,qz,qw,x,y,z`.
        #[arg(long, allow_hyphen_values = true)]
        pose0: Option<String>,
        /// Sampling resolution when the model is a mesh, m.
        #[arg(long, default_value_t = 0.05)]
        resolution: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recompute the summary of a run log.
    Report { log: PathBuf },
    /// Write the built-in target mesh as ASCII STL.
    Mockup {
        #[arg(long, default_value = "mockup.stl")]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Numeric(_) | Error::Singularity(_) | Error::Degenerate(_) => 3,
        Error::Io { .. } | Error::Parse { .. } => 4,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn load_scenario(path: &Path, filter: Option<&Path>) -> Result<Scenario> {
    let mut scn = Scenario::load(path, filter)?;
    if !scn.model.exists() {
        return Err(Error::Io {
            path: scn.model.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "model file not found"),
        });
    }
    scn.model = std::fs::canonicalize(&scn.model).map_err(|e| Error::Io {
        path: scn.model.clone(),
        source: e,
    })?;
    Ok(scn)
}

fn echo_config(out: &Path, scn: &Scenario) -> Result<()> {
    io::write_string(&out.join("effective.cfg"), &scn.to_config_string())
}

fn simulate(scenario: &Path, out: &Path, replicate: u64) -> Result<()> {
    let scn = load_scenario(scenario, None)?;
    let model = sim::load_model(&scn)?;
    let data = sim::simulate(&scn, &model, replicate)?;
    create_dir(out)?;
    echo_config(out, &scn)?;
    sim::write_simulation(out, &data)?;
    println!(
        "wrote {} truth rows, {} imu rows, {} scans to {}",
        data.truth.len(),
        data.imu.len(),
        data.scans.len(),
        out.display()
    );
    Ok(())
}

fn run(
    scenario: &Path,
    filter: Option<&Path>,
    out: &Path,
    no_adapt: bool,
    runs: usize,
    seed: Option<u64>,
) -> Result<()> {
    if runs == 0 {
        return Err(Error::InvalidArgument("--runs must be at least 1".into()));
    }
    let mut scn = load_scenario(scenario, filter)?;
    if let Some(s) = seed {
        scn.seed = s;
    }
    if no_adapt {
        scn.filter.mode = AdaptiveMode::Off;
    }
    let model = sim::load_model(&scn)?;
    info!("model: {} points", model.len());
    create_dir(out)?;
    echo_config(out, &scn)?;
    let all = sim::run_monte_carlo(&scn, &model, runs)?;
    for (j, records) in all.iter().enumerate() {
        let name = if runs == 1 {
            "run.csv".to_string()
        } else {
            format!("run_{j:03}.csv")
        };
        report::write_csv(&out.join(&name), records)?;
        if runs > 1 {
            println!("[{name}]");
        }
        print!("{}", Summary::from_records(records)?);
    }
    Ok(())
}

fn parse_pose(s: &str) -> Result<Pose> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("--pose0: not a number list: {s:?}")))?;
    if v.len() != 7 {
        return Err(Error::InvalidArgument(format!(
            "--pose0 expects qx,qy,qz,qw,x,y,z, got {} numbers",
            v.len()
        )));
    }
    let q = Quaternion::normalized(Vector3::new(v[0], v[1], v[2]), v[3])?;
    Ok(Pose::new(q, Vector3::new(v[4], v[5], v[6])))
}

fn icp_align(
    scan: &Path,
    model: &Path,
    eps_th: f64,
    i_max: usize,
    pose0: Option<&str>,
    resolution: f64,
    seed: u64,
) -> Result<()> {
    let scan = PointCloud::new(io::read_xyz(scan)?, Frame::Sensor);
    let text = io::read_to_string(model)?;
    let points = if io::is_stl(model, &text) {
        sample_model(&io::parse_stl(model, &text)?, resolution, seed)?.points
    } else {
        io::parse_xyz(model, &text)?
    };
    let model = ModelSet::new(points)?;
    let pose0 = pose0.map(parse_pose).transpose()?.unwrap_or_else(Pose::identity);
    let r = icp_register(&scan, &model, &pose0, &IcpConfig::new(eps_th, i_max))?;
    let q = r.pose.q;
    let rho = r.pose.rho;
    println!(
        "converged={} qx={} qy={} qz={} qw={} x={} y={} z={} epsilon={:e} iterations={}",
        r.converged, q.v.x, q.v.y, q.v.z, q.w, rho.x, rho.y, rho.z, r.epsilon, r.iterations
    );
    Ok(())
}

fn report(log: &Path) -> Result<()> {
    let records = report::read_csv(log)?;
    print!("{}", Summary::from_records(&records)?);
    Ok(())
}

fn write_mockup(out: &Path) -> Result<()> {
    io::write_string(out, &io::format_stl("mockup", &mockup::mockup_triangles()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate {
            scenario,
            out,
            replicate,
        } => simulate(scenario, &out.out, *replicate),
        Command::Run {
            scenario,
            filter,
            out,
            no_adapt,
            runs,
            seed,
        } => run(scenario, filter.as_deref(), &out.out, *no_adapt, *runs, *seed),
        Command::IcpAlign {
            scan,
            model,
            eps_th,
            i_max,
            pose0,
            resolution,
            seed,
        } => icp_align(scan, model, *eps_th, *i_max, pose0.as_deref(), *resolution, *seed),
        Command::Report { log } => report(log),
        Command::Mockup { out } => write_mockup(out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("relnav: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
