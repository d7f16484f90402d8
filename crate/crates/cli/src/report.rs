//! Aggregate run directories into tables laid out like the published ones.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;

use coffee_core::ssm::{count_mnist_params, count_params, count_smnist_params, CountOptions, EmbeddingCount, ModelKind};
use coffee_core::train::{parse_metrics_csv, MetricRow};

use crate::config::RunConfig;
use crate::rundir::{CONFIG_FILE, METRICS_FILE};
use crate::Common;

#[derive(Args, Debug, Clone)]
pub struct ReportArgs {
    /// Run directories, or directories containing run directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Write the markdown here as well as to stdout.
    #[arg(long)]
    pub markdown: Option<PathBuf>,
    /// Plot-ready CSV, one line per run.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: String,
    pub config: RunConfig,
    pub group: String,
    pub model: String,
    pub params: usize,
    pub epochs: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

fn model_label(kind: Option<ModelKind>, filter: bool) -> String {
    match (kind, filter) {
        (None, _) => "no SSM".into(),
        (Some(ModelKind::Coffee), true) => "COFFEE with output filtering".into(),
        (Some(ModelKind::Coffee), false) => "COFFEE".into(),
        (Some(ModelKind::S6), _) => "S6".into(),
        (Some(ModelKind::Linearized), _) => "linearized".into(),
    }
}

fn group_of(preset: Option<&str>, task: &str) -> String {
    match preset {
        Some(p) if p.starts_with("table") => {
            p.split('-').next().unwrap_or(p).trim_start_matches("table").to_string()
        }
        _ => task.to_string(),
    }
}

/// Pick the row a run is judged by: the test row when present, otherwise
/// the most accurate evaluation row (earliest on ties).
fn headline(rows: &[MetricRow]) -> Option<&MetricRow> {
    if let Some(t) = rows.iter().rev().find(|r| r.split == "test") {
        return Some(t);
    }
    rows.iter()
        .filter(|r| r.split == "eval" || r.split == "val")
        .fold(None, |best: Option<&MetricRow>, r| match best {
            Some(b) if b.accuracy >= r.accuracy => Some(b),
            _ => Some(r),
        })
}

pub fn summarize(dir: &Path) -> Result<RunSummary> {
    let cfg_text = fs::read_to_string(dir.join(CONFIG_FILE))
        .with_context(|| format!("{} has no {CONFIG_FILE}", dir.display()))?;
    let config = RunConfig::from_json(&cfg_text)?;
    let rows = parse_metrics_csv(
        &fs::read_to_string(dir.join(METRICS_FILE))
            .with_context(|| format!("{} has no {METRICS_FILE}", dir.display()))?,
    )?;
    let Some(h) = headline(&rows) else { bail!("{} has no evaluation rows", dir.display()) };
    let epochs = rows.iter().map(|r| r.epoch).max().unwrap_or(0);
    let (model, params) = match &config {
        RunConfig::Ih(r) => {
            let m = r.ih.vocab()?.len();
            let embedding = if r.frozen_row.is_some() { EmbeddingCount::Canonical } else { EmbeddingCount::Full };
            let opts = CountOptions { output_filter: r.output_filter, embedding };
            (model_label(Some(r.model), r.output_filter), count_params(r.model, r.n, r.d, m, opts))
        }
        RunConfig::Mnist(r) => {
            let k = r.model.unwrap_or(ModelKind::Coffee);
            (model_label(r.model, r.output_filter), count_mnist_params(k, r.n, r.output_filter))
        }
        RunConfig::Smnist(r) => (
            model_label(r.model, false),
            count_smnist_params(r.model.unwrap_or(ModelKind::Coffee), r.n, r.model.is_some()),
        ),
    };
    Ok(RunSummary {
        dir: dir.display().to_string(),
        group: group_of(config.preset(), config.task()),
        config,
        model,
        params,
        epochs,
        split: h.split.clone(),
        loss: h.loss,
        accuracy: h.accuracy,
    })
}

fn collect(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.join(CONFIG_FILE).is_file() {
            out.push(p.clone());
            continue;
        }
        let mut found: Vec<PathBuf> = fs::read_dir(p)
            .with_context(|| format!("cannot read {}", p.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join(CONFIG_FILE).is_file())
            .collect();
        if found.is_empty() {
            bail!("{} is not a run directory and contains none", p.display());
        }
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

fn reference_cells(cfg: &RunConfig) -> [String; 2] {
    let r = match cfg {
        RunConfig::Ih(r) => r.reference,
        RunConfig::Mnist(r) | RunConfig::Smnist(r) => r.reference,
    };
    match r {
        Some(r) => [format!("{:.3}", r.loss), format!("{:.3}", r.accuracy)],
        None => ["".into(), "".into()],
    }
}

fn table_row(cells: &[String]) -> String {
    format!("| {} |", cells.join(" | "))
}

fn header(cols: &[&str]) -> String {
    let mut s = table_row(&cols.iter().map(|c| c.to_string()).collect::<Vec<_>>());
    s.push('\n');
    s.push_str(&table_row(&cols.iter().map(|_| "---".to_string()).collect::<Vec<_>>()));
    s
}

pub fn markdown(runs: &[RunSummary]) -> String {
    let mut groups: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        groups.entry(r.group.clone()).or_default().push(r);
    }
    let mut out = String::new();
    for (g, rs) in groups {
        let title = if g.chars().all(|c| c.is_ascii_digit()) { format!("Table {g}") } else { g.clone() };
        out.push_str(&format!("### {title}\n\n"));
        let image = matches!(rs[0].config, RunConfig::Mnist(_) | RunConfig::Smnist(_));
        let cols: Vec<&str> = if image {
            vec!["Model", "Epochs", "n", "# parameters", "Loss", "Accuracy", "Reference loss", "Reference accuracy", "Run"]
        } else {
            let mut c = vec!["Model"];
            if g == "6" {
                c.push("L_seq");
            }
            c.extend(["n", "η", "D"]);
            if g == "3" {
                c.push("L_noise");
            }
            c.extend(["Loss", "Accuracy", "Reference loss", "Reference accuracy", "Epochs", "Run"]);
            c
        };
        out.push_str(&header(&cols));
        out.push('\n');
        for r in rs {
            let [rl, ra] = reference_cells(&r.config);
            let run = Path::new(&r.dir).file_name().map_or(r.dir.clone(), |f| f.to_string_lossy().into_owned());
            let cells: Vec<String> = match &r.config {
                RunConfig::Ih(c) => {
                    let mut v = vec![r.model.clone()];
                    if g == "6" {
                        v.push(c.ih.l_seq.to_string());
                    }
                    v.extend([c.n.to_string(), c.train.lr.to_string(), c.d.to_string()]);
                    if g == "3" {
                        v.push(c.ih.l_noise_between.unwrap_or(0).to_string());
                    }
                    v.extend([format!("{:.3}", r.loss), format!("{:.4}", r.accuracy), rl, ra, r.epochs.to_string(), run]);
                    v
                }
                RunConfig::Mnist(c) | RunConfig::Smnist(c) => vec![
                    r.model.clone(),
                    r.epochs.to_string(),
                    c.n.to_string(),
                    r.params.to_string(),
                    format!("{:.3}", r.loss),
                    format!("{:.1}%", 100.0 * r.accuracy),
                    rl,
                    ra,
                    run,
                ],
            };
            out.push_str(&table_row(&cells));
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub const CSV_HEADER: &str =
    "run,preset,group,task,model,n,D,lr,L_seq,L_tri,L_tar,L_noise,params,epochs,split,loss,accuracy,reference_loss,reference_accuracy";

pub fn csv(runs: &[RunSummary]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in runs {
        let [rl, ra] = reference_cells(&r.config);
        let (d, lseq, ltri, ltar, gap) = match &r.config {
            RunConfig::Ih(c) => (
                c.d.to_string(),
                c.ih.l_seq.to_string(),
                c.ih.l_tri.to_string(),
                c.ih.l_tar.to_string(),
                c.ih.l_noise_between.unwrap_or(0).to_string(),
            ),
            RunConfig::Mnist(_) => ("25".into(), "25".into(), String::new(), String::new(), String::new()),
            RunConfig::Smnist(_) => ("1".into(), "784".into(), String::new(), String::new(), String::new()),
        };
        let n = match &r.config {
            RunConfig::Ih(c) => c.n,
            RunConfig::Mnist(c) | RunConfig::Smnist(c) => c.n,
        };
        let fields = [
            r.dir.replace(',', "_"),
            r.config.preset().unwrap_or("").to_string(),
            r.group.clone(),
            r.config.task().to_string(),
            r.model.clone(),
            n.to_string(),
            d,
            r.config.train().lr.to_string(),
            lseq,
            ltri,
            ltar,
            gap,
            r.params.to_string(),
            r.epochs.to_string(),
            r.split.clone(),
            r.loss.to_string(),
            r.accuracy.to_string(),
            rl,
            ra,
        ];
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    s
}

pub fn report_cmd(_common: &Common, a: &ReportArgs) -> Result<bool> {
    let runs: Vec<RunSummary> = collect(&a.runs)?.iter().map(|d| summarize(d)).collect::<Result<_>>()?;
    let md = markdown(&runs);
    print!("{md}");
    if let Some(p) = &a.markdown {
        fs::write(p, &md)?;
    }
    if let Some(p) = &a.csv {
        fs::write(p, csv(&runs))?;
    }
    Ok(true)
}
