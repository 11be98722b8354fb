use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use sbrl_core::envs;
use sbrl_core::orchestrator::{
    self, load_checkpoint, save_checkpoint, BoundOptions, Checkpoint, Overlay, RunReport, TracedRollout,
};
use sbrl_core::{rng, Error};

use crate::{config, Format};

pub const CHECKPOINT_FILE: &str = "checkpoint.sbrl";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numeric(String),
    Certification(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Certification(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Numeric(m) | CliError::Certification(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Input(format!("`{}`: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn load(path: &Path) -> Result<Checkpoint, CliError> {
    load_checkpoint(path).map_err(|e| io_err(path, e))
}

fn sibling(checkpoint: &Path, name: &str) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(name)
}

pub fn train(config_path: &Path, out: &Path, seed: Option<u64>, resume: Option<&Path>) -> Result<(), CliError> {
    let mut config = config::load(config_path)?;
    if let Some(s) = seed {
        config.training.seed = s;
    }
    let resume = resume.map(load).transpose()?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| io_err(&ckpt_dir, e))?;
    write_file(&out.join("config.toml"), &config::render(&config))?;

    let latest = out.join(CHECKPOINT_FILE);
    let target = config.training.outer_iters;
    let result = orchestrator::run_training(&config, resume, |c| {
        eprintln!("iteration {}/{target}: checkpoint", c.iteration);
        save_checkpoint(&ckpt_dir.join(format!("iter_{:05}.sbrl", c.iteration)), c)?;
        save_checkpoint(&latest, c)
    });
    let (_, report) = match result {
        Ok(r) => r,
        Err(abort) => {
            if let Some(last) = &abort.checkpoint {
                save_checkpoint(&latest, last).map_err(|e| io_err(&latest, e))?;
                eprintln!(
                    "training stopped after {} iterations; last good state saved to {}",
                    last.iteration,
                    latest.display()
                );
            }
            return Err(abort.error.into());
        }
    };
    report.write_dir(out).map_err(|e| io_err(out, e))?;
    eprintln!(
        "done: {} iterations, safe rate {:.4}, barrier converged: {}",
        report.iterations, report.safe_rate, report.barrier_converged
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct Evaluation {
    safe_rate: f64,
    mean_return: f64,
    episodes: usize,
    seed: u64,
}

pub fn evaluate(checkpoint: &Path, episodes: usize, seed: Option<u64>, out: Option<&Path>) -> Result<(), CliError> {
    if episodes == 0 {
        return Err(CliError::Input("`--episodes` must be at least 1".into()));
    }
    let ckpt = load(checkpoint)?;
    let env = ckpt.config.env_spec()?;
    let seed = seed.unwrap_or(ckpt.config.training.seed);
    let rate = envs::empirical_safe_rate(
        &env,
        &ckpt.policy,
        episodes,
        ckpt.config.training.gamma,
        rng::substream_seed(seed, "eval"),
    )?;
    let eval = Evaluation {
        safe_rate: rate.rate,
        mean_return: rate.mean_return,
        episodes,
        seed,
    };
    let json = serde_json::to_string_pretty(&eval).expect("plain struct");
    println!("{json}");
    let path = out.map_or_else(|| sibling(checkpoint, "evaluation.json"), Path::to_path_buf);
    write_file(&path, &json)
}

pub fn certify(
    checkpoint: &Path,
    pairs: Option<usize>,
    retrain_steps: Option<usize>,
    trajectories: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let ckpt = load(checkpoint)?;
    let mut opts = BoundOptions::from_config(&ckpt.config);
    if let Some(p) = pairs {
        opts.pairs = p;
    }
    if let Some(k) = retrain_steps {
        opts.retrain_steps = k;
    }
    opts.trajectories = trajectories;
    let pb = orchestrator::practical_bound(&ckpt, &opts)?;
    let cert = &pb.certificate;
    let path = out.map_or_else(|| sibling(checkpoint, "certificate.json"), Path::to_path_buf);
    write_file(&path, &cert.to_json()?)?;
    eprintln!("model gap delta = {:?}; enlarged unsafe set {}", pb.delta, pb.enlarged_unsafe);
    println!("1-eta = {}", cert.bound);
    if !cert.valid {
        let s = &cert.condition_stats;
        return Err(CliError::Certification(format!(
            "certificate INVALID: failed {} (unsafe min {:.4}, init max {:.4} vs eta {:.4}, lie mean {:.2e}, \
             exceedance {:.4} +- {:.4})",
            cert.failures.join(", "),
            s.unsafe_min,
            s.init_max,
            cert.eta,
            s.lie_mean,
            cert.mc_crosscheck.exceed_frequency,
            cert.mc_crosscheck.std_error,
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct ExportDoc<'a> {
    report: &'a RunReport,
    overlay: &'a Overlay,
}

pub fn export(run: &Path, format: Format, out: Option<&Path>, episodes: usize) -> Result<(), CliError> {
    if !run.is_dir() {
        return Err(CliError::Input(format!("run directory `{}` does not exist", run.display())));
    }
    if episodes == 0 {
        return Err(CliError::Input("`--episodes` must be at least 1".into()));
    }
    let report_path = run.join(REPORT_FILE);
    let report: RunReport = serde_json::from_str(&fs::read_to_string(&report_path).map_err(|e| io_err(&report_path, e))?)
        .map_err(|e| io_err(&report_path, e))?;
    let ckpt = load(&run.join(CHECKPOINT_FILE))?;
    let overlay = orchestrator::overlay(&ckpt, episodes, rng::substream_seed(ckpt.config.training.seed, "export"))?;

    let out = out.map_or_else(|| run.join("export"), Path::to_path_buf);
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    match format {
        Format::Json => {
            let doc = ExportDoc {
                report: &report,
                overlay: &overlay,
            };
            let json = serde_json::to_string_pretty(&doc).map_err(|e| io_err(&out, e))?;
            write_file(&out.join("export.json"), &json)?;
        }
        Format::Csv => {
            orchestrator::write_metric_csvs(&report.metrics, &out.join("metrics")).map_err(|e| io_err(&out, e))?;
            write_csv(&out.join("trajectories.csv"), &overlay, true)?;
            write_csv(&out.join("barrier.csv"), &overlay, false)?;
        }
    }
    eprintln!("exported to {}", out.display());
    Ok(())
}

/// Rows `source,episode,t,...`; states then barrier, or barrier alone.
fn write_csv(path: &Path, overlay: &Overlay, with_states: bool) -> Result<(), CliError> {
    let n = overlay.real.first().map_or(0, |r| r.states[0].len());
    let mut text = String::from("source,episode,t");
    if with_states {
        for k in 0..n {
            text.push_str(&format!(",s{k}"));
        }
    }
    text.push_str(",barrier\n");
    let sources: [(&str, &[TracedRollout]); 2] = [("real", &overlay.real), ("synthetic", &overlay.synthetic)];
    for (source, rollouts) in sources {
        for (e, r) in rollouts.iter().enumerate() {
            for (t, (s, b)) in r.states.iter().zip(&r.barrier).enumerate() {
                text.push_str(&format!("{source},{e},{t}"));
                if with_states {
                    for v in s {
                        text.push_str(&format!(",{v}"));
                    }
                }
                text.push_str(&format!(",{b}\n"));
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}
