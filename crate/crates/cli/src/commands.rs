//! `simulate`, `train`, `denoise` and `evaluate`.

use std::fs;
use std::path::{Path, PathBuf};

use cascade_ct::cascade::{
    blend, load_level, load_model, read_manifest, save_model, train_cascade_resumable, write_manifest, CascadeModel,
    TrainedLevel, TrainingSet, MANIFEST_FILE,
};
use cascade_ct::image::{
    extract_patches, list_slices, load_paired_dir, load_slice, save_slice, save_slice_in_dir, ImageSlice,
    PairedDataset, SplitTag, Unit,
};
use cascade_ct::losses::FeatureExtractor;
use cascade_ct::metrics::{
    dataset_digest, difference_map, emit_panel, evaluate_with_images, EvalOptions, MetricsReport, PanelLayout,
};
use cascade_ct::simulate::{generate_paired_dataset, AcquisitionGeometry, DoseModel};
use cascade_ct::weights::save_weights;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExtractorSource, RunConfig, SCHEMA_VERSION};
use crate::{CliError, CliResult};

pub const DATASET_MANIFEST: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub id: String,
    pub ldct_sha256: String,
    pub ndct_sha256: String,
}

/// Everything needed to regenerate a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub size: usize,
    pub split: SplitTag,
    pub geometry: AcquisitionGeometry,
    pub dose: DoseModel,
    pub slices: Vec<SliceRecord>,
}

/// Simulates `n_slices` pairs from `seed` using the configured acquisition.
pub fn simulate_dataset(cfg: &RunConfig, n_slices: usize, seed: u64, split: SplitTag) -> CliResult<PairedDataset> {
    let s = &cfg.simulation;
    Ok(generate_paired_dataset(
        n_slices,
        s.size,
        &s.geometry(),
        &s.dose(),
        seed,
        split,
    )?)
}

/// Writes `ldct/`, `ndct/` and the dataset manifest; returns the manifest.
pub fn write_dataset(cfg: &RunConfig, data: &PairedDataset, seed: u64, out: &Path) -> CliResult<DatasetManifest> {
    let (ldct_dir, ndct_dir) = (out.join("ldct"), out.join("ndct"));
    create_dir(&ldct_dir)?;
    create_dir(&ndct_dir)?;
    let mut slices = Vec::new();
    for (l, n) in data.pairs() {
        let lp = save_slice_in_dir(l, &ldct_dir)?;
        let np = save_slice_in_dir(n, &ndct_dir)?;
        let digest = |p: &Path| fs::read(p).map(|b| sha256_hex(&b)).map_err(|e| io_err(p, e));
        slices.push(SliceRecord {
            id: l.id().to_string(),
            ldct_sha256: digest(&lp)?,
            ndct_sha256: digest(&np)?,
        });
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        seed,
        size: cfg.simulation.size,
        split: data.split(),
        geometry: cfg.simulation.geometry(),
        dose: cfg.simulation.dose(),
        slices,
    };
    let path = out.join(DATASET_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("serializable") + "\n";
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let data = simulate_dataset(cfg, cfg.simulation.n_slices, cfg.seed, SplitTag::Train)?;
    write_dataset(cfg, &data, cfg.seed, out)?;
    log::info!("wrote {} slice pairs to {}", data.len(), out.display());
    Ok(())
}

/// Loads `dir/ldct` + `dir/ndct`; validation problems exit with code 2.
pub fn load_dataset(dir: &Path, split: SplitTag) -> CliResult<PairedDataset> {
    if !dir.is_dir() {
        return Err(CliError::config(format!(
            "data directory {} does not exist",
            dir.display()
        )));
    }
    let (l, n) = (dir.join("ldct"), dir.join("ndct"));
    for d in [&l, &n] {
        if !d.is_dir() {
            return Err(CliError::config(format!("missing {}", d.display())));
        }
    }
    let data = load_paired_dir(&l, &n, split)?;
    if data.is_empty() {
        return Err(CliError::config(format!("no slice pairs in {}", dir.display())));
    }
    Ok(data)
}

/// Digest identifying a dataset directory: its manifest when present,
/// otherwise the pixel content.
pub fn dataset_dir_digest(dir: &Path, data: &PairedDataset) -> String {
    match fs::read(dir.join(DATASET_MANIFEST)) {
        Ok(bytes) => sha256_hex(&bytes),
        Err(_) => dataset_digest(data),
    }
}

pub fn feature_extractor(cfg: &RunConfig) -> CliResult<FeatureExtractor> {
    match cfg.perceptual.extractor {
        ExtractorSource::Random => Ok(FeatureExtractor::random(cfg.perceptual.random_seed)),
        ExtractorSource::Pretrained => {
            let path = FeatureExtractor::weights_path(cfg.perceptual.weights_path.as_deref());
            Ok(FeatureExtractor::from_file(path)?)
        }
    }
}

/// Patches `data` and trains the configured cascade into `out`, reusing
/// levels already present there with matching digests.
pub fn train_model(cfg: &RunConfig, data: &PairedDataset, out: &Path) -> CliResult<CascadeModel> {
    let specs = cfg.level_specs();
    let cfgs = cfg.train_configs(specs.len());
    let patches = extract_patches(data, cfg.patching.size, cfg.patching.stride)?;
    if patches.is_empty() {
        return Err(CliError::config(format!(
            "patching.size {} exceeds the slice size",
            cfg.patching.size
        )));
    }
    log::info!(
        "training on {} patches of {}x{}",
        patches.len(),
        cfg.patching.size,
        cfg.patching.size
    );
    let set = TrainingSet::from_patches(&patches)?;
    let fx = if specs.iter().any(|s| s.loss.needs_extractor()) {
        Some(feature_extractor(cfg)?)
    } else {
        None
    };
    create_dir(out)?;
    let previous = read_manifest(out).ok();
    let mut done: Vec<TrainedLevel> = Vec::new();
    let model = train_cascade_resumable(
        &specs,
        &set,
        &cfgs,
        fx.as_ref(),
        |k, digest| {
            let Some(m) = &previous else { return Ok(None) };
            match m.levels.get(k) {
                Some(entry) if entry.input_digest == digest => load_level(out, entry).map(Some).or(Ok(None)),
                _ => Ok(None),
            }
        },
        |level| {
            done.push(level.clone());
            let partial = CascadeModel { levels: done.clone() };
            let k = done.len() - 1;
            save_weights(&level.weights, out.join(cascade_ct::cascade::level_file_name(k)))?;
            write_manifest(out, &partial.manifest()?)
        },
    )?;
    save_model(&model, out)?;
    Ok(model)
}

pub fn train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> CliResult<()> {
    let data = load_dataset(data_dir, SplitTag::Train)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    train_model(cfg, &data, out)?;
    log::info!("model written to {}", out.join(MANIFEST_FILE).display());
    Ok(())
}

fn load_model_dir(dir: &Path) -> CliResult<CascadeModel> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(CliError::config(format!("{} is not a model directory", dir.display())));
    }
    Ok(load_model(dir)?)
}

fn panel_layout(cfg: &RunConfig) -> PanelLayout {
    PanelLayout {
        zoom: cfg.evaluation.panel_zoom,
        pad: cfg.evaluation.panel_pad,
    }
}

fn panel_window(cfg: &RunConfig) -> (f64, f64) {
    (cfg.evaluation.panel_window[0], cfg.evaluation.panel_window[1])
}

pub fn denoise(cfg: &RunConfig, model_dir: &Path, input: &Path, out: &Path) -> CliResult<()> {
    let model = load_model_dir(model_dir)?;
    let inputs: Vec<PathBuf> = if input.is_dir() {
        list_slices(input)?.into_values().collect()
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        return Err(CliError::config(format!("input {} does not exist", input.display())));
    };
    if inputs.is_empty() {
        return Err(CliError::config(format!("no .f32r slices in {}", input.display())));
    }
    create_dir(out)?;
    cfg.write_resolved(out)?;
    for path in inputs {
        let ldct = load_slice(&path)?;
        if ldct.unit() != Unit::Normalized {
            return Err(CliError::config(format!(
                "{}: expected normalized intensities",
                path.display()
            )));
        }
        let mut pred = model.predict(&ldct)?;
        if let Some([wl, wp]) = cfg.evaluation.blend {
            pred = blend(&ldct, &pred, wl, wp)?;
        }
        save_slice(&pred, out.join(format!("{}.f32r", ldct.id())))?;
        if cfg.evaluation.panels {
            emit_panel(
                &[("denoised", &pred)],
                panel_window(cfg),
                panel_layout(cfg),
                out.join(format!("{}.png", ldct.id())),
            )?;
        }
    }
    Ok(())
}

/// Scores `model` on `data` and writes the report, panels and difference
/// maps into `out`.
pub fn evaluate_into(
    cfg: &RunConfig,
    model: &CascadeModel,
    data: &PairedDataset,
    dataset_digest: String,
    out: &Path,
) -> CliResult<MetricsReport> {
    create_dir(out)?;
    let opts = EvalOptions {
        blend: cfg.evaluation.blend.map(|[a, b]| (a, b)),
        intermediate_levels: cfg.evaluation.intermediate_levels,
        max_val: cfg.evaluation.max_val,
        dataset_digest: Some(dataset_digest),
    };
    let (report, images) = evaluate_with_images(model, data, &opts)?;
    let path = out.join(REPORT_FILE);
    fs::write(&path, report.to_json()?).map_err(|e| io_err(&path, e))?;

    let diff_dir = out.join("differences");
    create_dir(&diff_dir)?;
    let finals = &images.iter().find(|(n, _)| n == "final").expect("final output").1;
    for (pred, (_, ndct)) in finals.iter().zip(data.pairs()) {
        let d = difference_map(pred, ndct, cfg.evaluation.difference_window)?;
        save_slice(&d.signed, diff_dir.join(format!("{}_final_minus_ndct.f32r", ndct.id())))?;
    }
    if cfg.evaluation.panels {
        let panel_dir = out.join("panels");
        create_dir(&panel_dir)?;
        for (i, (_, ndct)) in data.pairs().iter().enumerate().take(cfg.evaluation.panel_slices) {
            let mut cols: Vec<(&str, &ImageSlice)> = images.iter().map(|(n, v)| (n.as_str(), &v[i])).collect();
            cols.push(("ndct", ndct));
            emit_panel(
                &cols,
                panel_window(cfg),
                panel_layout(cfg),
                panel_dir.join(format!("{}.png", ndct.id())),
            )?;
        }
    }
    Ok(report)
}

pub fn evaluate(cfg: &RunConfig, model_dir: &Path, data_dir: &Path, out: &Path) -> CliResult<()> {
    let data = load_dataset(data_dir, SplitTag::Test)?;
    let model = load_model_dir(model_dir)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let digest = dataset_dir_digest(data_dir, &data);
    let report = evaluate_into(cfg, &model, &data, digest, out)?;
    if let Some(f) = report.output("final") {
        log::info!(
            "final: PSNR {:.3} dB, SSIM {:.4} over {} slices",
            f.aggregates.psnr_db.mean,
            f.aggregates.ssim.mean,
            f.per_image.len()
        );
    }
    Ok(())
}
