use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sonarslam::config::PipelineConfig;
use sonarslam::eval::{ape, cloud_to_mesh_distance, PreAlign};
use sonarslam::io::{ply, read_tum, Dataset};
use sonarslam::pipeline::{run_dataset, RunOptions};
use sonarslam::simkit::{generate_dataset, Scenario};
use sonarslam::tsdf::{extract_mesh, TsdfVolume};
use sonarslam::{Error, Result};

#[derive(Parser)]
#[command(name = "sonarslam", version, about = "Submap-based 3D sonar SLAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Align {
    StartFrame,
    Umeyama,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a scenario file.
    Simulate {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override every random seed of the scenario.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the SLAM pipeline on a dataset directory.
    Slam {
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run all stages sequentially on one thread.
        #[arg(long)]
        sync: bool,
    },
    /// Compare an estimated trajectory (and optionally a mesh) with ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long)]
        gt_mesh: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "start-frame")]
        align: Align,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract a mesh from a saved TSDF volume.
    Mesh {
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn simulate(spec: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut scenario = Scenario::load(spec)?;
    if let Some(s) = seed {
        scenario.reseed(s);
    }
    let ds = generate_dataset(&scenario, out)?;
    println!("wrote {} frames to {}", ds.frames.len(), out.display());
    Ok(())
}

fn slam(dataset: &Path, out: &Path, config: Option<&Path>, sync: bool) -> Result<()> {
    let cfg = match config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let ds = Dataset::load(dataset)?;
    let (run, metrics) = run_dataset(&ds, &cfg, RunOptions { sync }, out)?;
    println!(
        "{} frames, {} submaps, {} loop closures; frontend {:.1} ms/frame",
        run.trajectory.len(),
        run.submaps.len(),
        run.loop_closures.len(),
        run.timings.frontend_mean_ms()
    );
    if let Some(m) = metrics {
        println!(
            "APE rms {:.4} m (odometry {:.4} m); final yaw error {:.3} deg",
            m.slam.ape_rms, m.odometry.ape_rms, m.slam.final_yaw_error_deg
        );
        if let Some(map) = m.map {
            println!("map error {:.4} m (std {:.4} m)", map.e_map, map.e_std_map);
        }
    }
    Ok(())
}

fn eval(est: &Path, gt: &Path, mesh: Option<&Path>, gt_mesh: Option<&Path>, align: Align, out: &Path) -> Result<()> {
    let est_t = read_tum(est)?;
    let gt_t = read_tum(gt)?;
    let mode = match align {
        Align::StartFrame => PreAlign::StartFrame,
        Align::Umeyama => PreAlign::Umeyama,
    };
    let traj = ape(&est_t, &gt_t, mode)?;
    let map = match (mesh, gt_mesh) {
        (Some(m), Some(g)) => {
            let m = ply::read_ply(m)?.into_mesh()?;
            let g = ply::read_ply(g)?.into_mesh()?;
            let align = gt_t[0].1.compose(&est_t[0].1.inverse());
            Some(cloud_to_mesh_distance(m.vertices(), &g, &align)?)
        }
        (None, None) => None,
        _ => return Err(Error::InvalidParameter("--mesh and --gt-mesh go together".into())),
    };
    std::fs::create_dir_all(out).map_err(|e| Error::Stage(format!("{}: {e}", out.display())))?;
    let report = serde_json::json!({ "trajectory": traj, "map": map });
    let text = serde_json::to_string_pretty(&report).expect("serializable") + "\n";
    let write = |name: &str, body: &str| {
        let p = out.join(name);
        std::fs::write(&p, body).map_err(|e| Error::Stage(format!("{}: {e}", p.display())))
    };
    write("eval.json", &text)?;
    write("errors.csv", &traj.to_csv())?;
    println!("APE rms {:.4} m, std {:.4} m", traj.ape_rms, traj.ape_std);
    Ok(())
}

fn mesh(volume: &Path, out: &Path) -> Result<()> {
    let file = std::fs::File::open(volume).map_err(|e| Error::Stage(format!("{}: {e}", volume.display())))?;
    let v = TsdfVolume::read_from(std::io::BufReader::new(file))
        .map_err(|e| Error::Stage(format!("{}: {e}", volume.display())))?;
    let m = extract_mesh(&v);
    ply::write_mesh(out, &m)?;
    println!("{} vertices, {} triangles", m.vertices().len(), m.triangles().len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SLAM_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { spec, out, seed } => simulate(spec, out, *seed),
        Command::Slam {
            dataset,
            out,
            config,
            sync,
        } => slam(dataset, out, config.as_deref(), *sync),
        Command::Eval {
            est,
            gt,
            mesh: m,
            gt_mesh,
            align,
            out,
        } => eval(est, gt, m.as_deref(), gt_mesh.as_deref(), *align, out),
        Command::Mesh { volume, out } => mesh(volume, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
