//! End-to-end runner: frontend, backend and global-map stages connected by
//! bounded ordered queues, or run inline with `sync`.

use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::backend::{Backend, BackendReport, LoopClosure};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{ape, cloud_to_mesh_distance, MapErrorReport, PreAlign, TrajectoryErrorReport};
use crate::frontend::{Frontend, FrontendEvent, SubMap};
use crate::geometry::{RigidPose, SonarFrame};
use crate::io::{ply, tum, Dataset, Trajectory};
use crate::tsdf::{extract_mesh, GlobalMapState, TriangleMesh};

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Run every stage inline on the calling thread.
    pub sync: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct StageTimings {
    pub frontend_ms: Vec<f64>,
    pub backend_ms: Vec<f64>,
    pub global_ms: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl StageTimings {
    pub fn frontend_mean_ms(&self) -> f64 {
        mean(&self.frontend_ms)
    }
    pub fn backend_mean_ms(&self) -> f64 {
        mean(&self.backend_ms)
    }
    pub fn global_mean_ms(&self) -> f64 {
        mean(&self.global_ms)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SubmapSummary {
    pub id: usize,
    pub first_frame: usize,
    pub frame_count: usize,
    pub coarse_points: usize,
    pub cells: usize,
    pub odom_pose: [f64; 7],
    pub world_pose: [f64; 7],
    pub sequential_error: Option<f64>,
    pub odometry_only: bool,
}

fn pose7(p: &RigidPose) -> [f64; 7] {
    let t = p.translation();
    let q = p.quaternion();
    [t.x, t.y, t.z, q[0], q[1], q[2], q[3]]
}

pub struct RunOutput {
    pub trajectory: Trajectory,
    pub submaps: Vec<SubmapSummary>,
    pub loop_closures: Vec<LoopClosure>,
    pub global: GlobalMapState,
    pub timings: StageTimings,
    pub global_updates: usize,
}

/// Applies one or more backend results to the global map, coalescing them
/// into a single update at the newest optimization index.
struct GlobalStage {
    map: GlobalMapState,
    cfg: PipelineConfig,
    updates: usize,
}

impl GlobalStage {
    fn apply(&mut self, jobs: Vec<(Arc<SubMap>, BackendReport)>) -> Result<()> {
        let Some(n) = jobs.last().map(|j| j.1.n) else {
            return Ok(());
        };
        let mut new = Vec::new();
        for (s, report) in &jobs {
            self.map.insert_submap(s.id, Arc::clone(&s.tsdf), s.odom_pose)?;
            for (id, pose) in report.poses.iter().enumerate() {
                self.map.record_pose(id, report.n, *pose)?;
            }
            new.push(s.id);
        }
        let moved = self.map.moved_submaps(n, &self.cfg.reprocess);
        self.map.global_update(&new, &moved, n)?;
        self.updates += 1;
        Ok(())
    }
}

struct BackendStage {
    backend: Backend,
    summaries: Vec<SubmapSummary>,
}

impl BackendStage {
    fn process(&mut self, s: Arc<SubMap>) -> Result<BackendReport> {
        let report = self.backend.process_submap(Arc::clone(&s))?;
        log::info!(
            "submap {} closed with {} frames; {} loop closures; {} moved",
            s.id,
            s.frames.len(),
            report.loop_closures.len(),
            report.moved.len()
        );
        self.summaries.push(SubmapSummary {
            id: s.id,
            first_frame: s.first_frame_index,
            frame_count: s.frames.len(),
            coarse_points: s.coarse_cloud.len(),
            cells: s.tsdf.len(),
            odom_pose: pose7(&s.odom_pose),
            world_pose: [0.0; 7],
            sequential_error: report.sequential_error,
            odometry_only: report.odometry_only,
        });
        Ok(report)
    }

    fn finish(mut self) -> (Backend, Vec<SubmapSummary>) {
        for s in &mut self.summaries {
            s.world_pose = pose7(self.backend.current_pose(s.id).expect("placed"));
        }
        (self.backend, self.summaries)
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>, sink: &mut Vec<f64>) -> Result<T> {
    let start = Instant::now();
    let out = f();
    sink.push(start.elapsed().as_secs_f64() * 1e3);
    out
}

/// Runs the full pipeline over `frames` in order.
pub fn run(frames: Vec<SonarFrame>, cfg: &PipelineConfig, opts: RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let mut frontend = Frontend::new(cfg.clone())?;
    let mut backend = BackendStage {
        backend: Backend::new(cfg.clone())?,
        summaries: Vec::new(),
    };
    let mut global = GlobalStage {
        map: GlobalMapState::new(&cfg.tsdf)?,
        cfg: cfg.clone(),
        updates: 0,
    };
    let mut timings = StageTimings::default();

    if opts.sync {
        let mut closed: Vec<SubMap> = Vec::new();
        for frame in frames {
            let ev = timed(|| frontend.process_frame(frame), &mut timings.frontend_ms)?;
            if let FrontendEvent::SubmapClosed(_, s) = ev {
                closed.push(s);
            }
            for s in closed.drain(..) {
                let s = Arc::new(s);
                let report = timed(|| backend.process(Arc::clone(&s)), &mut timings.backend_ms)?;
                timed(|| global.apply(vec![(s, report)]), &mut timings.global_ms)?;
            }
        }
        if let Some(s) = frontend.finish() {
            let s = Arc::new(s);
            let report = timed(|| backend.process(Arc::clone(&s)), &mut timings.backend_ms)?;
            timed(|| global.apply(vec![(s, report)]), &mut timings.global_ms)?;
        }
    } else {
        let cap = cfg.queue_capacity;
        let (sub_tx, sub_rx) = sync_channel::<Arc<SubMap>>(cap);
        let (job_tx, job_rx) = sync_channel::<(Arc<SubMap>, BackendReport)>(cap);
        let (fe_res, be_res, gl_res) = std::thread::scope(|scope| {
            let fe = scope.spawn(move || -> Result<Vec<f64>> {
                let mut t = Vec::new();
                for frame in frames {
                    let ev = timed(|| frontend.process_frame(frame), &mut t)?;
                    if let FrontendEvent::SubmapClosed(_, s) = ev {
                        if sub_tx.send(Arc::new(s)).is_err() {
                            return Err(Error::Stage("backend stopped".into()));
                        }
                    }
                }
                if let Some(s) = frontend.finish() {
                    let _ = sub_tx.send(Arc::new(s));
                }
                Ok(t)
            });
            let be = scope.spawn(move || -> Result<(BackendStage, Vec<f64>)> {
                let mut t = Vec::new();
                for s in sub_rx {
                    let report = timed(|| backend.process(Arc::clone(&s)), &mut t)?;
                    if job_tx.send((s, report)).is_err() {
                        return Err(Error::Stage("global map stage stopped".into()));
                    }
                }
                Ok((backend, t))
            });
            let gl = scope.spawn(move || -> Result<(GlobalStage, Vec<f64>)> {
                let mut t = Vec::new();
                while let Some(jobs) = drain(&job_rx) {
                    timed(|| global.apply(jobs), &mut t)?;
                }
                Ok((global, t))
            });
            (fe.join(), be.join(), gl.join())
        });
        let join = |e: Box<dyn std::any::Any + Send>| Error::Stage(format!("stage panicked: {e:?}"));
        // Report the most upstream failure first.
        let fe_t = fe_res.map_err(join)?;
        let be_r = be_res.map_err(join)?;
        let gl_r = gl_res.map_err(join)?;
        timings.frontend_ms = fe_t?;
        let (b, bt) = be_r?;
        let (g, gt) = gl_r?;
        backend = b;
        global = g;
        timings.backend_ms = bt;
        timings.global_ms = gt;
    }

    let global_updates = global.updates;
    let (backend, submaps) = backend.finish();
    let trajectory = backend
        .frame_trajectory()
        .into_iter()
        .map(|(_, t, p)| (t, p))
        .collect();
    Ok(RunOutput {
        trajectory,
        submaps,
        loop_closures: backend.loop_closures().to_vec(),
        global: global.map,
        timings,
        global_updates,
    })
}

/// Blocks for one job, then takes everything already queued.
fn drain<T>(rx: &Receiver<T>) -> Option<Vec<T>> {
    let first = rx.recv().ok()?;
    let mut jobs = vec![first];
    while let Ok(j) = rx.try_recv() {
        jobs.push(j);
    }
    Some(jobs)
}

#[derive(Clone, Debug, Serialize)]
pub struct Metrics {
    pub slam: TrajectoryErrorReport,
    pub odometry: TrajectoryErrorReport,
    pub map: Option<MapErrorReport>,
    pub submaps: usize,
    pub loop_closures: usize,
}

/// Trajectory and map metrics against the dataset's ground truth. The map
/// is compared after the start-frame alignment of the trajectory.
pub fn evaluate(out: &RunOutput, mesh: &TriangleMesh, dataset: &Dataset) -> Result<Option<Metrics>> {
    let Some(gt) = &dataset.ground_truth else {
        return Ok(None);
    };
    let slam = ape(&out.trajectory, gt, PreAlign::StartFrame)?;
    let odometry = ape(&dataset.odometry(), gt, PreAlign::StartFrame)?;
    let map = match (&dataset.gt_mesh, mesh.is_empty()) {
        (Some(reference), false) => {
            let align = gt[0].1.compose(&out.trajectory[0].1.inverse());
            Some(cloud_to_mesh_distance(mesh.vertices(), reference, &align)?)
        }
        _ => None,
    };
    Ok(Some(Metrics {
        slam,
        odometry,
        map,
        submaps: out.submaps.len(),
        loop_closures: out.loop_closures.len(),
    }))
}

#[derive(Serialize)]
struct RunLog<'a> {
    frames: usize,
    submaps: usize,
    loop_closures: usize,
    global_updates: usize,
    parallel: bool,
    sync: bool,
    frontend_mean_ms: f64,
    backend_mean_ms: f64,
    global_mean_ms: f64,
    timings: &'a StageTimings,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// Runs the pipeline on a dataset and writes every output file into
/// `out_dir`: est.tum, mesh.ply, global.tsdf, submaps.json, run_log.json,
/// config.toml and, with ground truth, metrics.json and errors.csv.
pub fn run_dataset(dataset: &Dataset, cfg: &PipelineConfig, opts: RunOptions, out_dir: &Path) -> Result<(RunOutput, Option<Metrics>)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_text(&out_dir.join("config.toml"), &cfg.to_toml())?;
    let out = run(dataset.frames.clone(), cfg, opts)?;
    tum::write_tum(&out_dir.join("est.tum"), &out.trajectory)?;
    let volume = out.global.volume();
    let mesh = extract_mesh(&volume);
    ply::write_mesh(&out_dir.join("mesh.ply"), &mesh)?;
    let vpath = out_dir.join("global.tsdf");
    let file = std::fs::File::create(&vpath).map_err(|e| Error::io(&vpath, e))?;
    volume
        .write_to(std::io::BufWriter::new(file))
        .map_err(|e| Error::io(&vpath, e))?;
    write_text(
        &out_dir.join("submaps.json"),
        &json(&serde_json::json!({
            "submaps": out.submaps,
            "loop_closures": out.loop_closures.iter().map(|l| serde_json::json!({
                "from": l.from, "to": l.to, "error": l.error, "overlap": l.overlap,
                "transform": pose7(&l.transform),
            })).collect::<Vec<_>>(),
        })),
    )?;
    write_text(
        &out_dir.join("run_log.json"),
        &json(&RunLog {
            frames: dataset.frames.len(),
            submaps: out.submaps.len(),
            loop_closures: out.loop_closures.len(),
            global_updates: out.global_updates,
            parallel: crate::par::is_parallel(),
            sync: opts.sync,
            frontend_mean_ms: out.timings.frontend_mean_ms(),
            backend_mean_ms: out.timings.backend_mean_ms(),
            global_mean_ms: out.timings.global_mean_ms(),
            timings: &out.timings,
        }),
    )?;
    let metrics = evaluate(&out, &mesh, dataset)?;
    if let Some(m) = &metrics {
        write_text(
            &out_dir.join("metrics.json"),
            &json(&serde_json::json!({ "metrics": m, "config": cfg })),
        )?;
        write_text(&out_dir.join("errors.csv"), &m.slam.to_csv())?;
    }
    Ok((out, metrics))
}
