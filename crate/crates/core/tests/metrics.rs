use cascade_ct::cascade::{
    CascadeLevelSpec, CascadeModel, InputRule, LabelRule, OutputRule, TrainConfig, TrainHistory, TrainedLevel,
};
use cascade_ct::image::{ImageSlice, PairedDataset, SplitTag, Unit};
use cascade_ct::losses::LossConfig;
use cascade_ct::metrics::{
    emit_panel, evaluate, mse, psnr, ssim, Aggregates, EvalOptions, ImageMetrics, PanelLayout, PSNR_INF,
};
use cascade_ct::network::{LayerSpec, NetworkSpec};
use cascade_ct::weights::{WeightEntry, WeightStore};
use cascade_ct::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_slice(side: usize, seed: u64) -> ImageSlice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..side * side).map(|_| rng.random_range(0.0f32..1.0)).collect();
    ImageSlice::new(side, side, px, Unit::Normalized, format!("r{seed}")).unwrap()
}

/// Direct double loop over every 11x11 window with a 2-D Gaussian.
#[allow(clippy::needless_range_loop)]
fn ssim_oracle(a: &ImageSlice, b: &ImageSlice, range: f64) -> f64 {
    let (h, w) = (a.height(), a.width());
    let mut kernel = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for r in 0..=h - 11 {
        for c in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = kernel[i][j] / total;
                    let x = f64::from(a.get(r + i, c + j));
                    let y = f64::from(b.get(r + i, c + j));
                    mx += k * x;
                    my += k * y;
                    sxx += k * x * x;
                    syy += k * y * y;
                    sxy += k * x * y;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

#[test]
fn ssim_matches_direct_window_oracle() {
    for seed in 0..4 {
        let a = random_slice(32, seed);
        let noise = random_slice(32, seed + 100);
        let px = a
            .pixels()
            .iter()
            .zip(noise.pixels())
            .map(|(x, n)| (x * 0.8 + n * 0.2).clamp(0.0, 1.0))
            .collect();
        let b = ImageSlice::new(32, 32, px, Unit::Normalized, "b").unwrap();
        let got = ssim(&a, &b, 1.0).unwrap();
        let want = ssim_oracle(&a, &b, 1.0);
        assert!((got - want).abs() < 1e-6, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn ssim_rejects_images_smaller_than_window() {
    let a = random_slice(10, 0);
    assert!(matches!(ssim(&a, &a, 1.0), Err(Error::Shape(_))));
}

#[test]
fn psnr_of_constant_offset() {
    let a = ImageSlice::new(4, 4, vec![0.5; 16], Unit::Normalized, "a").unwrap();
    let b = ImageSlice::new(4, 4, vec![0.6; 16], Unit::Normalized, "b").unwrap();
    let e = mse(&a, &b).unwrap();
    let expected = 10.0 * (1.0 / e).log10();
    assert!((psnr(&a, &b, 1.0).unwrap() - expected).abs() < 1e-12);
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_INF);
}

fn identity_model() -> CascadeModel {
    let network = NetworkSpec {
        name: "identity".into(),
        input_channels: 1,
        layers: vec![LayerSpec::conv(1, 1, 1)],
        global_residual: false,
    };
    let mut kernel = vec![0.0; 9];
    kernel[4] = 1.0;
    let weights = WeightStore::new(vec![
        WeightEntry::new("layer00.conv.kernel", vec![1, 1, 3, 3], kernel).unwrap(),
        WeightEntry::new("layer00.conv.bias", vec![1], vec![0.0]).unwrap(),
    ])
    .unwrap();
    CascadeModel::new(vec![TrainedLevel {
        spec: CascadeLevelSpec {
            network,
            loss: LossConfig::mse(),
            input_rule: InputRule::Ldct,
            label_rule: LabelRule::Ndct,
            output_rule: OutputRule::Direct,
        },
        weights,
        train: TrainConfig::default(),
        history: TrainHistory::default(),
        input_digest: String::new(),
    }])
    .unwrap()
}

#[test]
fn identity_model_on_ndct_scores_perfectly() {
    let pairs = (0..3)
        .map(|s| {
            let n = random_slice(16, s);
            (n.clone(), n)
        })
        .collect();
    let data = PairedDataset::new(pairs, SplitTag::Test).unwrap();
    let opts = EvalOptions {
        blend: Some((0.3, 0.7)),
        ..EvalOptions::default()
    };
    let report = evaluate(&identity_model(), &data, &opts).unwrap();
    for name in ["ldct", "final", "blended"] {
        let out = report.output(name).unwrap();
        assert_eq!(out.per_image.len(), 3);
        for row in &out.per_image {
            assert_eq!(row.psnr_db, PSNR_INF, "{name}");
            assert_eq!(row.ssim, 1.0);
            assert_eq!(row.mse, 0.0);
        }
    }
    let json = report.to_json().unwrap();
    assert!(json.contains("\"INF\""));
    let back: cascade_ct::metrics::MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
}

#[test]
fn evaluation_does_not_depend_on_pair_order() {
    let pairs: Vec<(ImageSlice, ImageSlice)> = (0..4)
        .map(|s| (random_slice(16, s), random_slice(16, s + 10).with_id(format!("r{s}"))))
        .collect();
    let forward = PairedDataset::new(pairs.clone(), SplitTag::Test).unwrap();
    let reversed = PairedDataset::new(pairs.into_iter().rev().collect(), SplitTag::Test).unwrap();
    let model = identity_model();
    let a = evaluate(&model, &forward, &EvalOptions::default()).unwrap();
    let b = evaluate(&model, &reversed, &EvalOptions::default()).unwrap();
    assert_eq!(
        a.output("final").unwrap().aggregates,
        b.output("final").unwrap().aggregates
    );
}

#[test]
fn aggregates_are_mean_and_population_std() {
    let rows: Vec<ImageMetrics> = [(30.0, 0.8), (32.0, 0.9), (34.0, 1.0)]
        .iter()
        .enumerate()
        .map(|(i, &(p, s))| ImageMetrics {
            id: i.to_string(),
            psnr_db: p,
            ssim: s,
            mse: 0.0,
        })
        .collect();
    let agg = Aggregates::of(&rows);
    assert!((agg.psnr_db.mean - 32.0).abs() < 1e-12);
    assert!((agg.psnr_db.std - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!((agg.ssim.mean - 0.9).abs() < 1e-12);
}

#[test]
fn panel_errors_leave_no_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("panel.png");
    let a = random_slice(16, 0);
    let b = random_slice(20, 1);
    let layout = PanelLayout::default();
    assert!(emit_panel(&[("a", &a), ("b", &b)], (0.0, 1.0), layout, &path).is_err());
    assert!(emit_panel(&[], (0.0, 1.0), layout, &path).is_err());
    assert!(emit_panel(&[("a", &a)], (1.0, 0.0), layout, &path).is_err());
    assert!(!path.exists());

    emit_panel(&[("ldct", &a), ("ndct", &a)], (0.0, 1.0), layout, &path).unwrap();
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&path).unwrap()));
    let reader = decoder.read_info().unwrap();
    let (w, h) = layout.canvas_size(2, 16, 16);
    assert_eq!((reader.info().width as usize, reader.info().height as usize), (w, h));
}
