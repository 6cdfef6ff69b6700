//! Named end-to-end comparisons on synthetic data.

use std::fs;
use std::path::Path;

use cascade_ct::cascade::{blend, CascadeModel};
use cascade_ct::image::{ImageSlice, PairedDataset, SplitTag};
use cascade_ct::metrics::{dataset_digest, emit_panel, Aggregates, MetricsReport, PanelLayout};
use cascade_ct::network::{param_count, ParamCount};
use cascade_ct::simulate::derive_seed;
use serde::{Deserialize, Serialize};

use crate::commands::{create_dir, evaluate_into, simulate_dataset, train_model, write_dataset};
use crate::config::{NetworkKind, Preset, RunConfig, SCHEMA_VERSION};
use crate::{CliError, CliResult};

pub const EXPERIMENT_REPORT: &str = "experiment_report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    DrlVsCnn10,
    HybridVsWu,
    CascadeDepth,
    Blending,
}

impl Experiment {
    pub const NAMES: [&'static str; 4] = ["drl_vs_cnn10", "hybrid_vs_wu", "cascade_depth", "blending"];

    pub fn parse(name: &str) -> CliResult<Self> {
        match name {
            "drl_vs_cnn10" => Ok(Experiment::DrlVsCnn10),
            "hybrid_vs_wu" => Ok(Experiment::HybridVsWu),
            "cascade_depth" => Ok(Experiment::CascadeDepth),
            "blending" => Ok(Experiment::Blending),
            other => Err(CliError::config(format!(
                "unknown experiment {other:?}; valid names: {}",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

/// Aggregate scores of one output against NDCT on the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub aggregates: Aggregates,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub param_count: Option<ParamCount>,
}

/// Metric change from `from` to `to` (positive PSNR/SSIM deltas are gains).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub from: String,
    pub to: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
}

impl Delta {
    fn between(from: &Entry, to: &Entry) -> Delta {
        let (a, b) = (&from.aggregates, &to.aggregates);
        Delta {
            from: from.name.clone(),
            to: to.name.clone(),
            psnr_db: b.psnr_db.mean - a.psnr_db.mean,
            ssim: b.ssim.mean - a.ssim.mean,
            mse: b.mse.mean - a.mse.mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub experiment: Experiment,
    pub train_dataset_sha256: String,
    pub test_dataset_sha256: String,
    pub entries: Vec<Entry>,
    pub deltas: Vec<Delta>,
    /// Panel files relative to the experiment directory.
    pub panels: Vec<String>,
}

impl ExperimentReport {
    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

struct Workspace<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    train: PairedDataset,
    test: PairedDataset,
    test_digest: String,
}

impl Workspace<'_> {
    fn variant(&self, preset: Preset, levels: usize, wu_network: NetworkKind) -> RunConfig {
        let mut cfg = self.cfg.clone();
        cfg.model.preset = preset;
        cfg.model.levels = levels;
        cfg.model.wu_network = wu_network;
        cfg
    }

    fn train(&self, name: &str, cfg: &RunConfig) -> CliResult<CascadeModel> {
        log::info!("experiment: training {name}");
        train_model(cfg, &self.train, &self.out.join("models").join(name))
    }

    /// Full evaluation (with intermediate levels) under `evaluations/<name>`.
    fn evaluate(&self, name: &str, model: &CascadeModel) -> CliResult<MetricsReport> {
        let mut cfg = self.cfg.clone();
        cfg.evaluation.intermediate_levels = true;
        evaluate_into(
            &cfg,
            model,
            &self.test,
            self.test_digest.clone(),
            &self.out.join("evaluations").join(name),
        )
    }

    /// Per-slice estimates after every level.
    fn predictions(&self, model: &CascadeModel) -> CliResult<Vec<Vec<ImageSlice>>> {
        self.test
            .pairs()
            .iter()
            .map(|(l, _)| model.predict_levels(l).map_err(CliError::from))
            .collect()
    }

    /// One panel per rendered test slice; columns are (label, image per slice).
    fn panels(&self, tag: &str, columns: &[(String, Vec<ImageSlice>)]) -> CliResult<Vec<String>> {
        let dir = self.out.join("panels");
        create_dir(&dir)?;
        let layout = PanelLayout {
            zoom: self.cfg.evaluation.panel_zoom,
            pad: self.cfg.evaluation.panel_pad,
        };
        let window = (self.cfg.evaluation.panel_window[0], self.cfg.evaluation.panel_window[1]);
        let mut files = Vec::new();
        for (i, (_, ndct)) in self
            .test
            .pairs()
            .iter()
            .enumerate()
            .take(self.cfg.evaluation.panel_slices)
        {
            let mut cols: Vec<(&str, &ImageSlice)> = columns.iter().map(|(n, v)| (n.as_str(), &v[i])).collect();
            cols.push(("ndct", ndct));
            let rel = format!("panels/{tag}_{}.png", ndct.id());
            emit_panel(&cols, window, layout, self.out.join(&rel))?;
            files.push(rel);
        }
        Ok(files)
    }
}

fn entry(report: &MetricsReport, output: &str, name: &str, params: Option<ParamCount>) -> Entry {
    Entry {
        name: name.to_string(),
        aggregates: report.output(output).expect("output present").aggregates,
        param_count: params,
    }
}

fn level_output(n_levels: usize, k: usize) -> String {
    if k == n_levels {
        "final".into()
    } else {
        format!("level_{k}")
    }
}

fn ldct_column(ws: &Workspace) -> (String, Vec<ImageSlice>) {
    ("ldct".into(), ws.test.pairs().iter().map(|(l, _)| l.clone()).collect())
}

fn column(name: &str, preds: &[Vec<ImageSlice>], level: usize) -> (String, Vec<ImageSlice>) {
    (name.to_string(), preds.iter().map(|p| p[level].clone()).collect())
}

fn blend_weights(cfg: &RunConfig) -> (f64, f64) {
    cfg.evaluation.blend.map(|[a, b]| (a, b)).unwrap_or((0.3, 0.7))
}

fn blended_column(
    ws: &Workspace,
    name: &str,
    preds: &[Vec<ImageSlice>],
    level: usize,
) -> CliResult<(String, Vec<ImageSlice>)> {
    let (wl, wp) = blend_weights(ws.cfg);
    let imgs = ws
        .test
        .pairs()
        .iter()
        .zip(preds)
        .map(|((l, _), p)| blend(l, &p[level], wl, wp).map_err(CliError::from))
        .collect::<CliResult<Vec<_>>>()?;
    Ok((name.to_string(), imgs))
}

/// Runs `kind` and writes `experiment_report.json` plus panels to `out`.
pub fn run(kind: Experiment, cfg: &RunConfig, out: &Path) -> CliResult<()> {
    run_experiment(kind, cfg, out).map(|_| ())
}

pub fn run_experiment(kind: Experiment, cfg: &RunConfig, out: &Path) -> CliResult<ExperimentReport> {
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let train = simulate_dataset(cfg, cfg.simulation.n_slices, cfg.seed, SplitTag::Train)?;
    let test_seed = derive_seed(cfg.seed, 0x7e57);
    let mut test_cfg = cfg.clone();
    test_cfg.simulation.dose_seed = derive_seed(cfg.simulation.dose_seed, 0x7e57);
    let test = simulate_dataset(&test_cfg, cfg.evaluation.test_slices, test_seed, SplitTag::Test)?;
    write_dataset(cfg, &train, cfg.seed, &out.join("data").join("train"))?;
    write_dataset(&test_cfg, &test, test_seed, &out.join("data").join("test"))?;
    let ws = Workspace {
        cfg,
        out,
        test_digest: dataset_digest(&test),
        train,
        test,
    };

    let (entries, deltas, panels) = match kind {
        Experiment::DrlVsCnn10 => drl_vs_cnn10(&ws)?,
        Experiment::HybridVsWu => hybrid_vs_wu(&ws)?,
        Experiment::CascadeDepth => cascade_depth(&ws)?,
        Experiment::Blending => blending(&ws)?,
    };
    let report = ExperimentReport {
        schema_version: SCHEMA_VERSION,
        experiment: kind,
        train_dataset_sha256: dataset_digest(&ws.train),
        test_dataset_sha256: ws.test_digest.clone(),
        entries,
        deltas,
        panels,
    };
    let path = out.join(EXPERIMENT_REPORT);
    let text = serde_json::to_string_pretty(&report).expect("serializable") + "\n";
    fs::write(&path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    for e in &report.entries {
        log::info!(
            "{}: PSNR {:.3} dB, SSIM {:.4}",
            e.name,
            e.aggregates.psnr_db.mean,
            e.aggregates.ssim.mean
        );
    }
    Ok(report)
}

type Outcome = (Vec<Entry>, Vec<Delta>, Vec<String>);

/// Single-level difference networks of both architectures, same loss and
/// schedule.
fn drl_vs_cnn10(ws: &Workspace) -> CliResult<Outcome> {
    let mut entries = Vec::new();
    let mut cols = vec![ldct_column(ws)];
    let mut ldct = None;
    for (name, kind) in [("cnn10", NetworkKind::Cnn10), ("drl", NetworkKind::Drl)] {
        let cfg = ws.variant(Preset::Wu, 1, kind);
        let model = ws.train(name, &cfg)?;
        let report = ws.evaluate(name, &model)?;
        let params = param_count(&cfg.level_specs()[0].network);
        ldct.get_or_insert_with(|| entry(&report, "ldct", "ldct", None));
        entries.push(entry(&report, "final", name, Some(params)));
        cols.push(column(name, &ws.predictions(&model)?, 0));
    }
    entries.insert(0, ldct.expect("two models evaluated"));
    let deltas = vec![Delta::between(&entries[1], &entries[2])];
    let panels = ws.panels("drl_vs_cnn10", &cols)?;
    Ok((entries, deltas, panels))
}

/// Perceptual DRL alone, the Wu difference cascade, and the hybrid cascade.
fn hybrid_vs_wu(ws: &Workspace) -> CliResult<Outcome> {
    let hybrid_cfg = ws.variant(Preset::Hybrid, 2, ws.cfg.model.wu_network);
    let hybrid = ws.train("hybrid_2", &hybrid_cfg)?;
    let hr = ws.evaluate("hybrid_2", &hybrid)?;
    let wu_cfg = ws.variant(Preset::Wu, 2, ws.cfg.model.wu_network);
    let wu = ws.train("wu_2", &wu_cfg)?;
    let wr = ws.evaluate("wu_2", &wu)?;
    let entries = vec![
        entry(&hr, "ldct", "ldct", None),
        entry(&hr, "level_1", "drl_perceptual", None),
        entry(&wr, "final", "wu_2", None),
        entry(&hr, "final", "hybrid_2", None),
    ];
    let deltas = vec![
        Delta::between(&entries[1], &entries[3]),
        Delta::between(&entries[2], &entries[3]),
    ];
    let (hp, wp) = (ws.predictions(&hybrid)?, ws.predictions(&wu)?);
    let cols = vec![
        ldct_column(ws),
        column("a drl perceptual", &hp, 0),
        column("b wu cascade", &wp, 1),
        column("c hybrid cascade", &hp, 1),
    ];
    let panels = ws.panels("hybrid_vs_wu", &cols)?;
    Ok((entries, deltas, panels))
}

/// Two- versus three-level cascades for both compositions: the hybrid with
/// an appended Wu-style level, and three Wu difference levels. The shallow
/// model is the deep model's prefix, so one training run serves both.
fn cascade_depth(ws: &Workspace) -> CliResult<Outcome> {
    let mut entries = Vec::new();
    let mut deltas = Vec::new();
    let mut cols = vec![ldct_column(ws)];
    for (name, preset) in [("hybrid", Preset::Hybrid), ("wu", Preset::Wu)] {
        let cfg = ws.variant(preset, 3, ws.cfg.model.wu_network);
        let model = ws.train(&format!("{name}_3"), &cfg)?;
        let report = ws.evaluate(&format!("{name}_3"), &model)?;
        if entries.is_empty() {
            entries.push(entry(&report, "ldct", "ldct", None));
        }
        let two = entry(&report, &level_output(3, 2), &format!("{name}_2"), None);
        let three = entry(&report, &level_output(3, 3), &format!("{name}_3"), None);
        deltas.push(Delta::between(&two, &three));
        entries.push(two);
        entries.push(three);
        if preset == Preset::Hybrid {
            let preds = ws.predictions(&model)?;
            cols.push(blended_column(ws, "blended 2-level", &preds, 1)?);
            cols.push(blended_column(ws, "blended 3-level", &preds, 2)?);
        }
    }
    let panels = ws.panels("cascade_depth", &cols)?;
    Ok((entries, deltas, panels))
}

/// Hybrid cascade output blended with the LDCT input at each grid weight.
fn blending(ws: &Workspace) -> CliResult<Outcome> {
    let cfg = ws.variant(Preset::Hybrid, 2, ws.cfg.model.wu_network);
    let model = ws.train("hybrid_2", &cfg)?;
    let mut entries = Vec::new();
    let mut cols = vec![ldct_column(ws)];
    let preds = ws.predictions(&model)?;
    for &[wl, wp] in &ws.cfg.evaluation.blend_grid {
        let name = format!("blend_{wl}_{wp}");
        let mut eval_cfg = ws.cfg.clone();
        eval_cfg.evaluation.blend = Some([wl, wp]);
        let report = evaluate_into(
            &eval_cfg,
            &model,
            &ws.test,
            ws.test_digest.clone(),
            &ws.out.join("evaluations").join(&name),
        )?;
        if entries.is_empty() {
            entries.push(entry(&report, "ldct", "ldct", None));
            entries.push(entry(&report, "final", "hybrid_2", None));
        }
        entries.push(entry(&report, "blended", &name, None));
        let imgs = ws
            .test
            .pairs()
            .iter()
            .zip(&preds)
            .map(|((l, _), p)| blend(l, &p[1], wl, wp).map_err(CliError::from))
            .collect::<CliResult<Vec<_>>>()?;
        cols.push((format!("{wl}/{wp}"), imgs));
    }
    let deltas = entries[2..].iter().map(|e| Delta::between(&entries[1], e)).collect();
    let panels = ws.panels("blending", &cols)?;
    Ok((entries, deltas, panels))
}
