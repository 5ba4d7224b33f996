use std::path::{Path, PathBuf};

use ddnfl::cert::{roa_from_certificate, verify_fixed_controller, StabilityCertificate, Verdict};
use ddnfl::expert::generate_expert_demos;
use ddnfl::finetune::{finetune, FinetuneError};
use ddnfl::io;
use ddnfl::linalg::Vector;
use ddnfl::nn::NnController;
use ddnfl::plant::{collect, simulate_closed_loop, ExperimentData};
use ddnfl::sdp::ClarabelSolver;
use ddnfl::synthesis::{synthesize, SynthesisError, SynthesisTrace};
use ddnfl::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::ManifestBuilder;

pub const CONTROLLER_FILE: &str = "controller.json";
pub const CERTIFICATE_FILE: &str = "certificate.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const FINETUNE_FILE: &str = "finetune.json";
pub const NORMS_FILE: &str = "norms.csv";
pub const LOSS_FILE: &str = "loss.csv";

fn solver(cfg: &RunConfig) -> ClarabelSolver {
    ClarabelSolver::new(cfg.solver)
}

/// Run `body` with a manifest that is written to `out_dir` whatever the
/// outcome.
fn with_manifest(
    command: &str,
    cfg: &RunConfig,
    out_dir: &Path,
    body: impl FnOnce(&mut ManifestBuilder) -> Result<(), CliError>,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut m = ManifestBuilder::new(command, cfg);
    let res = body(&mut m);
    let code = res.as_ref().err().map_or(0, CliError::exit_code);
    if let Err(e) = &res {
        m.note("error", e.to_string());
    }
    m.finish(out_dir, code)?;
    res
}

fn write_json<T: serde::Serialize>(m: &mut ManifestBuilder, path: PathBuf, value: &T) -> Result<(), CliError> {
    io::write_json(&path, value)?;
    m.output(&path);
    Ok(())
}

fn read_data(m: &mut ManifestBuilder, dir: &Path) -> Result<ExperimentData, CliError> {
    for p in io::data_paths(dir) {
        if p.exists() {
            m.input(&p)?;
        }
    }
    let data = io::read_data(dir)?;
    data.require_pe()?;
    Ok(data)
}

fn read_controller(m: &mut ManifestBuilder, path: &Path) -> Result<NnController, CliError> {
    m.input(path)?;
    Ok(io::read_json(path)?)
}

pub fn collect_cmd(cfg: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    with_manifest("collect", cfg, out_dir, |m| {
        let data = collect(&cfg.plant_model()?, cfg.data.t, cfg.data.excitation, &cfg.state_box()?, cfg.seed)?;
        for p in io::write_data(out_dir, &data)? {
            m.output(&p);
        }
        m.note("pe_ok", data.pe_ok);
        if data.pe_ok {
            Ok(())
        } else {
            Err(Error::NotPersistentlyExciting.into())
        }
    })
}

fn write_trace(m: &mut ManifestBuilder, out_dir: &Path, trace: &SynthesisTrace) -> Result<(), CliError> {
    let p = out_dir.join(TRACE_FILE);
    io::write_trace_csv(&p, &trace.records)?;
    m.output(&p);
    m.note("outer_iterations", trace.records.len());
    Ok(())
}

fn train_one(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<(), CliError> {
    with_manifest("train", cfg, out_dir, |m| {
        let data = read_data(m, data_dir)?;
        let plant = cfg.plant_model()?;
        let bx = cfg.state_box()?;
        let s = &cfg.synthesis;
        let demos = generate_expert_demos(&plant, &bx, &s.expert, s.demo_count, s.seed)?;
        let started = std::time::Instant::now();
        let res = synthesize(&data, &bx, &cfg.controller.layer_sizes, &demos, s, &solver(cfg));
        m.timing("synthesis_s", started.elapsed().as_secs_f64());
        match res {
            Ok(r) => {
                write_json(m, out_dir.join(CONTROLLER_FILE), &r.controller)?;
                write_json(m, out_dir.join(CERTIFICATE_FILE), &r.certificate)?;
                write_trace(m, out_dir, &r.trace)?;
                m.note("log_det_q1", r.certificate.log_det_q1);
                Ok(())
            }
            Err(SynthesisError::NotConverged { controller, trace }) => {
                write_json(m, out_dir.join(CONTROLLER_FILE), &*controller)?;
                write_trace(m, out_dir, &trace)?;
                Err(CliError::NotConverged(format!(
                    "no verified controller after {} outer iterations; best iterate saved",
                    trace.records.len()
                )))
            }
            Err(SynthesisError::SdpInfeasibleAtIteration { iteration, status, controller, trace }) => {
                write_json(m, out_dir.join(CONTROLLER_FILE), &*controller)?;
                write_trace(m, out_dir, &trace)?;
                Err(CliError::SynthesisInfeasible(format!(
                    "stability program infeasible at outer iteration {iteration} ({status:?})"
                )))
            }
            Err(SynthesisError::Core(e)) => Err(e.into()),
        }
    })
}

/// Train for `seeds` consecutive seeds starting at `cfg.seed`. With more than
/// one seed each run goes to `out_dir/seed-<s>` and runs are spread over the
/// rayon pool; the exit status is that of the first failing seed.
pub fn train_cmd(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, seeds: usize) -> Result<(), CliError> {
    if seeds <= 1 {
        return train_one(cfg, data_dir, out_dir);
    }
    let results: Vec<(u64, Result<(), CliError>)> = (cfg.seed..cfg.seed + seeds as u64)
        .into_par_iter()
        .map(|s| {
            let dir = out_dir.join(format!("seed-{s}"));
            (s, train_one(&cfg.clone().with_seed(s), data_dir, &dir))
        })
        .collect();
    let summary: Vec<serde_json::Value> = results
        .iter()
        .map(|(s, r)| {
            serde_json::json!({
                "seed": s,
                "exit_code": r.as_ref().err().map_or(0, CliError::exit_code),
                "dir": format!("seed-{s}"),
            })
        })
        .collect();
    io::write_json(&out_dir.join("sweep.json"), &summary)?;
    for (s, r) in results {
        if let Err(e) = r {
            return Err(match e {
                CliError::NotConverged(msg) => CliError::NotConverged(format!("seed {s}: {msg}")),
                other => other,
            });
        }
    }
    Ok(())
}

fn check_box(cfg: &RunConfig, nn: &NnController, data: &ExperimentData) -> Result<(), CliError> {
    let n = cfg.state_box.lower.len();
    if nn.n_x() != data.n_x() || nn.n_u() != data.n_u() || n != data.n_x() {
        return Err(CliError::Config(format!(
            "dimension mismatch: controller {}→{}, data n_x={} n_u={}, box dimension {n}",
            nn.n_x(),
            nn.n_u(),
            data.n_x(),
            data.n_u()
        )));
    }
    Ok(())
}

pub fn verify_cmd(cfg: &RunConfig, controller: &Path, data_dir: &Path, out_dir: &Path) -> Result<(), CliError> {
    with_manifest("verify", cfg, out_dir, |m| {
        let nn = read_controller(m, controller)?;
        let data = read_data(m, data_dir)?;
        check_box(cfg, &nn, &data)?;
        let verdict = match verify_fixed_controller(&nn, &data, &cfg.state_box()?, &solver(cfg)) {
            Err(Error::Solver(detail)) => {
                Verdict::Infeasible { status: ddnfl::sdp::SolveStatus::NumericalError, detail }
            }
            other => other?,
        };
        match verdict {
            Verdict::Certified(c) => {
                m.note("log_det_q1", c.log_det_q1);
                m.note("margin", c.margin);
                write_json(m, out_dir.join(CERTIFICATE_FILE), &c)
            }
            Verdict::Infeasible { status, detail } => {
                m.note("solver_status", status);
                Err(CliError::VerificationInfeasible(format!("no certificate ({status:?}): {detail}")))
            }
        }
    })
}

pub fn finetune_cmd(cfg: &RunConfig, controller: &Path, data_dir: &Path, out_dir: &Path) -> Result<(), CliError> {
    with_manifest("finetune", cfg, out_dir, |m| {
        let nn = read_controller(m, controller)?;
        let data = read_data(m, data_dir)?;
        check_box(cfg, &nn, &data)?;
        match finetune(&nn, &data, &cfg.state_box()?, &cfg.finetune, &solver(cfg)) {
            Ok(r) => {
                m.note("already_stable", r.already_stable);
                m.note("total_delta", r.total_delta);
                m.note("outer_iterations", r.outer_iterations());
                m.note("inner_iterations", r.inner_iterations());
                m.timing("finetune_s", r.wall_time_s);
                write_json(m, out_dir.join(CONTROLLER_FILE), &r.controller)?;
                write_json(m, out_dir.join(CERTIFICATE_FILE), &r.certificate)?;
                write_json(m, out_dir.join(FINETUNE_FILE), &r)
            }
            Err(FinetuneError::Core(e)) => Err(e.into()),
            Err(FinetuneError::SdpInfeasibleAtIteration { iteration, status, controller, .. }) => {
                write_json(m, out_dir.join(CONTROLLER_FILE), &*controller)?;
                Err(CliError::SynthesisInfeasible(format!(
                    "stability program infeasible at outer iteration {iteration} ({status:?})"
                )))
            }
            Err(e @ (FinetuneError::NotConverged { .. } | FinetuneError::InnerLoopStalled { .. })) => {
                let (FinetuneError::NotConverged { controller, records }
                | FinetuneError::InnerLoopStalled { controller, records, .. }) = &e
                else {
                    unreachable!()
                };
                write_json(m, out_dir.join(CONTROLLER_FILE), &**controller)?;
                write_json(m, out_dir.join(FINETUNE_FILE), records)?;
                Err(CliError::NotConverged(e.to_string()))
            }
        }
    })
}

pub struct ReportInputs {
    pub certificate: Option<PathBuf>,
    pub controllers: Vec<PathBuf>,
    pub trace: Option<PathBuf>,
    pub dims: Vec<[usize; 2]>,
}

pub fn report_cmd(cfg: &RunConfig, inputs: &ReportInputs, out_dir: &Path) -> Result<(), CliError> {
    if inputs.certificate.is_none() && inputs.controllers.is_empty() && inputs.trace.is_none() {
        return Err(CliError::Config("nothing to report: pass --certificate, --controller or --trace".into()));
    }
    with_manifest("report", cfg, out_dir, |m| {
        if let Some(path) = &inputs.certificate {
            m.input(path)?;
            let cert: StabilityCertificate = io::read_json(path)?;
            let roa = roa_from_certificate(&cert)?;
            let dims = if inputs.dims.is_empty() { &cfg.report.dims } else { &inputs.dims };
            for &[i, j] in dims {
                if i == 0 || j == 0 {
                    return Err(CliError::Config("slice dimensions are 1-based".into()));
                }
                let pts = roa.slice_boundary(i - 1, j - 1, cfg.report.boundary_points)?;
                let p = out_dir.join(format!("roa_{i}_{j}.csv"));
                io::write_roa_csv(&p, (i, j), &pts)?;
                m.output(&p);
            }
        }
        if !inputs.controllers.is_empty() {
            let plant = cfg.plant_model()?;
            let x0 = match &cfg.report.x0 {
                Some(v) => Vector::from_column_slice(v),
                None => cfg.state_box()?.sample(&mut ChaCha8Rng::seed_from_u64(cfg.seed)),
            };
            m.note("x0", x0.as_slice());
            let mut names = Vec::new();
            let mut series = Vec::new();
            for path in &inputs.controllers {
                let nn = read_controller(m, path)?;
                let traj = simulate_closed_loop(&plant, &nn, &x0, cfg.report.steps)?;
                names.push(path.display().to_string());
                series.push(traj.norms);
            }
            let p = out_dir.join(NORMS_FILE);
            io::write_time_series_csv(&p, plant.dt(), &names, &series)?;
            m.output(&p);
        }
        if let Some(path) = &inputs.trace {
            m.input(path)?;
            let recs = io::read_trace_csv(path)?;
            let p = out_dir.join(LOSS_FILE);
            io::write_loss_csv(&p, &recs)?;
            m.output(&p);
        }
        Ok(())
    })
}
