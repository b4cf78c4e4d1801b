use std::path::{Path, PathBuf};

use mmdml::dgp::{self, attenuated_plim_for_subset, descriptives, oracle_bounds, DgpConfig};
use mmdml::dml::{run_scheme, split_indices, EstimationReport, SplitKind, SplitScheme, DEFAULT_ALPHA};
use mmdml::eval::render::{report_markdown, write_report, write_text, write_trace};
use mmdml::eval::{default_roster, epoch_trace, metrics::ols_baseline, run_benchmark};
use mmdml::io::{self, MANIFEST_FILE};
use mmdml::learners::{presets, train_fusion, LearnerKind};
use mmdml::{Dataset, Error, Result, Scalar};

use crate::config::{absolute, check_alpha, RunConfig, RunRecord, Step, RUN_FILE};
use crate::{BenchmarkArgs, EstimateArgs, GenerateArgs, ImportArgs, ReplayArgs, TraceArgs};

pub const ESTIMATE_FILE: &str = "estimate.json";

fn output_dir(flag: Option<PathBuf>, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    flag.or_else(|| cfg.and_then(|c| c.outputs.clone()))
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `outputs` in the config".into()))
}

/// Result directories must not hold a dataset, whose run.json they would
/// overwrite.
fn check_result_dir(out: &Path) -> Result<()> {
    if out.join(MANIFEST_FILE).exists() {
        return Err(Error::Config(format!(
            "{} holds a dataset; write results to another directory",
            out.display()
        )));
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<Option<RunConfig>> {
    path.map(RunConfig::load).transpose()
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let dgp = match &cfg {
        Some(c) => c
            .dgp
            .clone()
            .ok_or_else(|| Error::Config("the config has no `dgp` section".into()))?,
        None => DgpConfig::three_modalities(
            a.n.ok_or_else(|| Error::Config("pass --config or --n".into()))?,
            a.rho.unwrap_or(0.9),
            a.feature_dim.unwrap_or(8),
            a.seed.unwrap_or(0),
        ),
    };
    let out = output_dir(a.out, cfg.as_ref())?;
    execute(&Step::Generate { dgp }, &out)
}

pub fn estimate(a: EstimateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (mut learner, entry_mods) = match cfg.as_ref().and_then(|c| c.learner(&a.learner)) {
        Some(e) => (e.learner.clone(), e.modalities.clone()),
        None => match presets::by_name(&a.learner) {
            Some(s) => (s, None),
            None => {
                let mut names: Vec<String> = presets::builtin().iter().map(|(n, _)| n.to_string()).collect();
                if let Some(c) = &cfg {
                    names.extend(c.learners.iter().map(|l| l.name.clone()));
                }
                return Err(Error::Config(format!(
                    "unknown learner `{}`; available: {}",
                    a.learner,
                    names.join(", ")
                )));
            }
        },
    };
    if let Some(s) = a.learner_seed {
        learner.seed = s;
    }
    let mut scheme = cfg
        .as_ref()
        .map(|c| c.scheme.clone())
        .unwrap_or_else(|| SplitScheme::single(0.5, 1, 0));
    if let Some(f) = a.split {
        scheme.kind = SplitKind::Single { train_fraction: f };
    }
    if let Some(k) = a.kfold {
        scheme.kind = SplitKind::Kfold { k };
    }
    if let Some(r) = a.repeats {
        scheme.repeats = r;
        scheme.repeat_seeds = None;
    }
    if let Some(s) = a.seed {
        scheme.seed = s;
        scheme.repeat_seeds = None;
    }
    let alpha = a.alpha.or(cfg.as_ref().map(|c| c.alpha)).unwrap_or(DEFAULT_ALPHA);
    let out = output_dir(a.out, cfg.as_ref())?;
    let step = Step::Estimate {
        data: absolute(&a.data)?,
        learner_name: a.learner,
        learner,
        modalities: a.modalities.or(entry_mods),
        scheme,
        alpha,
    };
    execute(&step, &out)
}

pub fn benchmark(a: BenchmarkArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let data = a.data.as_deref().map(absolute).transpose()?;
    if data.is_none() && cfg.dgp.is_none() {
        return Err(Error::Config("pass --data or give the config a `dgp` section".into()));
    }
    let roster = if cfg.learners.is_empty() {
        default_roster()
    } else {
        cfg.learners.clone()
    };
    let out = output_dir(a.out, Some(&cfg))?;
    let step = Step::Benchmark {
        dgp: if data.is_none() { cfg.dgp.clone() } else { None },
        data,
        roster,
        scheme: cfg.scheme.clone(),
        alpha: cfg.alpha,
    };
    execute(&step, &out)
}

pub fn trace(a: TraceArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (mut fusion, mut learner_seed, entry_mods) = match &cfg {
        None => (presets::fusion(), 0, None),
        Some(c) => {
            let entry = match &a.learner {
                Some(name) => c
                    .learner(name)
                    .ok_or_else(|| Error::Config(format!("the config has no learner `{name}`")))?,
                None => c
                    .learners
                    .iter()
                    .find(|l| matches!(l.learner.kind, LearnerKind::Fusion(_)))
                    .ok_or_else(|| Error::Config("the config has no fusion learner".into()))?,
            };
            match &entry.learner.kind {
                LearnerKind::Fusion(p) => (p.clone(), entry.learner.seed, entry.modalities.clone()),
                other => {
                    return Err(Error::Config(format!(
                        "trace needs a fusion learner, `{}` is {}",
                        entry.name,
                        other.name()
                    )))
                }
            }
        }
    };
    if let Some(e) = a.epochs {
        fusion.epochs = e;
    }
    if let Some(s) = a.step {
        fusion.step_size = s;
    }
    if let Some(b) = a.batch {
        fusion.batch_size = b;
    }
    if let Some(s) = a.learner_seed {
        learner_seed = s;
    }
    let alpha = a.alpha.or(cfg.as_ref().map(|c| c.alpha)).unwrap_or(DEFAULT_ALPHA);
    let out = output_dir(a.out, cfg.as_ref())?;
    let step = Step::Trace {
        data: absolute(&a.data)?,
        fusion,
        learner_seed,
        train_fraction: a.train_fraction,
        split_seed: a.split_seed,
        modalities: a.modalities.or(entry_mods),
        alpha,
    };
    execute(&step, &out)
}

pub fn import_embeddings(a: ImportArgs) -> Result<()> {
    let step = Step::ImportEmbeddings {
        embeddings: absolute(&a.embeddings)?,
        modality: a.modality,
        replace: a.replace,
    };
    execute(&step, &a.data)
}

pub fn replay(a: ReplayArgs) -> Result<()> {
    let record = RunRecord::load(&a.run)?;
    let out = match a.out {
        Some(o) => o,
        None => a
            .run
            .parent()
            .map(|p| if p.as_os_str().is_empty() { Path::new(".") } else { p })
            .unwrap_or(Path::new("."))
            .to_path_buf(),
    };
    for step in &record.steps {
        execute(step, &out)?;
    }
    Ok(())
}

fn modalities_or_all(ds: &Dataset, mods: &Option<Vec<String>>) -> Vec<String> {
    mods.clone().unwrap_or_else(|| ds.modality_names())
}

/// Runs one resolved step writing into `out`, then records it in `out/run.json`.
pub fn execute(step: &Step, out: &Path) -> Result<()> {
    match step {
        Step::Generate { dgp } => {
            let ds = dgp::generate::<f64>(dgp)?;
            io::write_dataset(out, &ds)?;
            println!("{}", descriptives(&ds));
            if ds.oracle.is_some() {
                let b = oracle_bounds(&ds)?;
                println!(
                    "oracle: RMSE(D) = {:.4}, RMSE(Y) = {:.4}, R2(D) = {:.4}, R2(Y) = {:.4}",
                    b.rmse_d, b.rmse_y, b.r2_d, b.r2_y
                );
                println!("OLS theta = {:.4}, theta0 = {}", b.ols_theta, ds.manifest.theta0);
            }
            if ds.manifest.mode == "surrogate" {
                let all = ds.modality_names();
                println!("attenuated limit = {:.4}", attenuated_plim_for_subset(&ds.manifest, &all));
            }
            RunRecord::new(vec![step.clone()]).write(out)?;
            println!("wrote {}", out.display());
        }
        Step::Estimate {
            data,
            learner,
            modalities,
            scheme,
            alpha,
            ..
        } => {
            check_result_dir(out)?;
            check_alpha(*alpha)?;
            let ds = io::read_dataset::<f64>(data)?;
            let mods = modalities_or_all(&ds, modalities);
            let report = EstimationReport::from_summary(run_scheme(&ds, learner, scheme, &mods, *alpha)?);
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Numerical(e.to_string()))?;
            write_text(&out.join(ESTIMATE_FILE), &(json + "\n"))?;
            RunRecord::new(vec![step.clone()]).write(out)?;
            print!("{}", report.summary_text());
        }
        Step::Benchmark {
            data,
            dgp,
            roster,
            scheme,
            alpha,
        } => {
            check_result_dir(out)?;
            check_alpha(*alpha)?;
            let ds = match (data, dgp) {
                (Some(d), _) => io::read_dataset::<f64>(d)?,
                (None, Some(cfg)) => dgp::generate::<f64>(cfg)?,
                (None, None) => return Err(Error::Config("benchmark needs data or a dgp".into())),
            };
            let report = run_benchmark(&ds, roster, scheme, *alpha)?;
            write_report(out, &report)?;
            RunRecord::new(vec![step.clone()]).write(out)?;
            print!("{}", report_markdown(&report));
        }
        Step::Trace {
            data,
            fusion,
            learner_seed,
            train_fraction,
            split_seed,
            modalities,
            alpha,
        } => {
            check_result_dir(out)?;
            check_alpha(*alpha)?;
            let ds = io::read_dataset::<f64>(data)?;
            let mods = modalities_or_all(&ds, modalities);
            let (train_rows, test_rows) = split_indices(ds.n(), *train_fraction, *split_seed)?;
            let train = ds.select_rows(&train_rows);
            let test = ds.select_rows(&test_rows);
            let net = train_fusion(fusion, &train, Some(&test), &mods, *learner_seed)?;
            let trace = epoch_trace(&net.log, &test, *alpha)?;
            let ols = ols_baseline(ds.y.view(), ds.d.view())?.as_f64();
            let mut refs = vec![("theta0", ds.manifest.theta0), ("OLS", ols)];
            if ds.manifest.mode == "surrogate" {
                refs.push(("attenuated limit", attenuated_plim_for_subset(&ds.manifest, &mods)));
            }
            write_trace(out, &trace, &refs)?;
            RunRecord::new(vec![step.clone()]).write(out)?;
            if let (Some(f), Some(l)) = (trace.first(), trace.last()) {
                println!(
                    "epoch {}: theta_hat = {:.4}; epoch {}: theta_hat = {:.4} [{:.4}, {:.4}]",
                    f.epoch, f.theta_hat, l.epoch, l.theta_hat, l.ci_low, l.ci_high
                );
            }
        }
        Step::ImportEmbeddings {
            embeddings,
            modality,
            replace,
        } => {
            let block = io::import_block(out, embeddings, modality, *replace)?;
            let run_path = out.join(RUN_FILE);
            let mut record = if run_path.exists() {
                RunRecord::load(&run_path)?
            } else {
                RunRecord::new(Vec::new())
            };
            record.steps.push(step.clone());
            record.write(out)?;
            println!(
                "imported {} columns from {} as block `{modality}`",
                block.columns, block.source
            );
        }
    }
    Ok(())
}
