use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde_json::json;
use sspcm_core::estimator::snapshot::load_params;
use sspcm_core::geometry::GridDims;
use sspcm_core::trainer::{snapshot_path, EpochRow};
use sspcm_core::{
    analyze_pi, evaluate_pck, generate_dataset, load_dataset, load_oracle, run_training_with, GenerateConfig, Method,
    NetId, RunOptions, Sample, Split,
};

use crate::config::parse_config;
use crate::rundir::{write, RunDirectory, BATCH_FILE, METRICS_FILE, REPORT_FILE};
use crate::{CliError, CliResult};

/// Parses `WxH`, e.g. `48x64`.
pub fn parse_image_size(s: &str) -> Result<GridDims, String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    if w == 0 || h == 0 {
        return Err(format!("image size must be positive, got {s:?}"));
    }
    Ok(GridDims::new(h, w))
}

pub struct GenDataArgs {
    pub out: PathBuf,
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    pub seed: u64,
    pub image_size: GridDims,
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let cfg = GenerateConfig {
        n_labeled: a.labeled,
        n_unlabeled: a.unlabeled,
        n_test: a.test,
        seed: a.seed,
        image_dims: a.image_size,
    };
    if a.out.join("meta.json").exists() {
        return Err(CliError::Runtime(anyhow!("{} already holds a dataset", a.out.display())));
    }
    let meta = generate_dataset(&cfg, &a.out)?;
    println!(
        "wrote {} labeled, {} unlabeled, {} test samples to {}",
        meta.n_labeled,
        meta.n_unlabeled,
        meta.n_test,
        a.out.display()
    );
    Ok(())
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub config: PathBuf,
    pub out: PathBuf,
    pub method: Option<Method>,
    pub seed: Option<u64>,
    pub force: bool,
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let text = fs::read_to_string(&a.config)
        .with_context(|| format!("reading {}", a.config.display()))
        .map_err(CliError::Usage)?;
    let mut cfg = parse_config(&text)
        .with_context(|| format!("config {}", a.config.display()))
        .map_err(CliError::Usage)?;
    if let Some(m) = a.method {
        cfg.method = m;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let data = load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let run = RunDirectory::create(&a.out, a.force)?;
    run.write_preamble(&cfg, &a.data, &data.meta.index_sha256)?;

    let metrics_path = run.file(METRICS_FILE);
    let mut metrics = File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    writeln!(metrics, "{}", sspcm_core::trainer::METRICS_HEADER).context("writing metrics")?;
    let mut write_err = None;
    let mut on_epoch = |r: &EpochRow| {
        if let Err(e) = metrics.write_all(r.csv_line().as_bytes()).and_then(|_| metrics.flush()) {
            write_err.get_or_insert(e);
        }
        eprintln!(
            "epoch {:>3}  l_sup {:.5}  l_unsup {:.5} {:.5} {:.5}  val pck a/b/c {:.3} {:.3} {:.3}",
            r.epoch, r.l_sup, r.l_unsup1, r.l_unsup2, r.l_unsup3, r.pck_a, r.pck_b, r.pck_c
        );
    };
    let result = run_training_with(
        &cfg,
        &data,
        RunOptions {
            swap_roles: false,
            snapshot_dir: Some(run.path().to_path_buf()),
            on_epoch: Some(&mut on_epoch),
        },
    )?;
    if let Some(e) = write_err {
        return Err(CliError::Runtime(anyhow!("writing {}: {e}", metrics_path.display())));
    }
    let report = &result.report;
    let mut batches = String::from("epoch,batch,l_sup,l_unsup1,l_unsup2,l_unsup3,l_final\n");
    for b in &report.batches {
        batches.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            b.epoch, b.batch, b.l_sup, b.l_unsup1, b.l_unsup2, b.l_unsup3, b.l_final
        ));
    }
    write(&run.file(BATCH_FILE), batches.as_bytes())?;
    let summary = json!({
        "method": report.method,
        "reported_net": report.reported_net.name(),
        "final_test_pck": report.final_test_pck,
        "test_pck": {
            "a": finite(report.test_pck[0]),
            "b": finite(report.test_pck[1]),
            "c": finite(report.test_pck[2]),
        },
        "pck_alpha": cfg.pck_alpha,
        "wall_clock_secs": report.wall_clock_secs,
        "counters": report.counters,
    });
    write(&run.file(REPORT_FILE), &serde_json::to_vec_pretty(&summary).map_err(anyhow::Error::from)?)?;
    println!(
        "test PCK@{} of net {}: {:.4}",
        cfg.pck_alpha,
        report.reported_net.name(),
        report.final_test_pck
    );
    Ok(())
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub struct EvalArgs {
    pub data: PathBuf,
    pub params: PathBuf,
    pub split: Split,
    pub alpha: f64,
    pub json: Option<PathBuf>,
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    if a.split == Split::Unlabeled {
        return Err(CliError::Usage(anyhow!("the unlabeled split has no labels to evaluate against")));
    }
    if !(a.alpha > 0.0) {
        return Err(CliError::Usage(anyhow!("--alpha must be positive")));
    }
    let data = load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let params = load_params(&a.params).with_context(|| format!("loading {}", a.params.display()))?;
    let samples: Vec<&Sample> = data.split(a.split).collect();
    if samples.is_empty() {
        return Err(CliError::Runtime(anyhow!("split has no samples")));
    }
    let value = evaluate_pck(&params, &samples, a.alpha)?;
    let out = a.json.clone().unwrap_or_else(|| sibling(&a.params, "eval.json"));
    let doc = json!({
        "params": a.params,
        "split": a.split,
        "alpha": a.alpha,
        "samples": samples.len(),
        "pck": value,
    });
    write(&out, &serde_json::to_vec_pretty(&doc).map_err(anyhow::Error::from)?)?;
    println!("PCK@{} on {} split ({} samples): {value:.4}", a.alpha, split_name(a.split), samples.len());
    Ok(())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Labeled => "labeled",
        Split::Unlabeled => "unlabeled",
        Split::Test => "test",
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.join(name),
        _ => PathBuf::from(name),
    }
}

pub struct AnalyzeArgs {
    pub data: PathBuf,
    pub run: PathBuf,
    pub epoch: usize,
    pub out: PathBuf,
    pub tau: Option<f64>,
}

pub fn analyze(a: &AnalyzeArgs) -> CliResult<()> {
    let run = RunDirectory::open(&a.run)?;
    let cfg = run.config()?;
    let tau = a.tau.unwrap_or(cfg.tau);
    if !(0.0..=1.0).contains(&tau) {
        return Err(CliError::Usage(anyhow!("--tau must lie in [0, 1]")));
    }
    let load = |id: NetId| {
        let p = snapshot_path(run.path(), id, a.epoch);
        load_params(&p).with_context(|| format!("loading {}", p.display()))
    };
    let (net_a, net_b) = (load(NetId::A)?, load(NetId::B)?);
    let data = load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let oracle = load_oracle(&a.data).with_context(|| format!("loading oracle of {}", a.data.display()))?;
    let samples: Vec<&Sample> = data.split(Split::Unlabeled).collect();
    let report = analyze_pi(&net_a, &net_b, &samples, &oracle, tau)?;
    write(&a.out, report.to_csv().as_bytes())?;
    let s = &report.summary;
    let summary_path = sibling(&a.out, "summary.json");
    write(&summary_path, &serde_json::to_vec_pretty(s).map_err(anyhow::Error::from)?)?;
    if s.low_confidence {
        eprintln!("warning: only {} rows; correlations are low-confidence", s.rows);
    }
    println!(
        "{} rows ({} with PI): spearman(conf, -error) = {:.4}, spearman(PI, error) = {:.4}",
        s.rows, s.rows_with_pi, s.corr_conf_neg_error, s.corr_pi_error
    );
    Ok(())
}
