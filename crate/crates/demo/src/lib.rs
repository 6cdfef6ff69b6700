//! WebAssembly bindings for a static browser page: simulate a low-dose
//! slice at any dose, blend it with a smoothed reconstruction, and inspect
//! the receptive field of the two denoising networks.
//!
//! The plain functions hold the logic and run natively in tests; the
//! `#[wasm_bindgen]` items only adapt types for JavaScript.

use cascade_ct::cascade::blend;
use cascade_ct::image::ImageSlice;
use cascade_ct::metrics::{psnr, ssim};
use cascade_ct::network::{build_cnn10, build_drl, param_count, BnMode, Network, NetworkSpec, Params};
use cascade_ct::simulate::{
    fbp_slice, make_phantom, radon, simulate_low_dose, AcquisitionGeometry, DoseModel, PhantomSpec, ReconFilter,
};
use cascade_ct::tensor::Tensor;
use wasm_bindgen::prelude::*;

/// One simulated acquisition: the clean reference, the Ram-Lak LDCT and a
/// Hann-filtered reconstruction of the same noisy data that stands in for a
/// denoiser output.
#[derive(Debug, Clone)]
pub struct Acquisition {
    pub ndct: ImageSlice,
    pub ldct: ImageSlice,
    pub smooth: ImageSlice,
}

pub fn acquire(size: usize, dose_fraction: f64, seed: u32) -> cascade_ct::Result<Acquisition> {
    let geometry = AcquisitionGeometry::for_size(size);
    let phantom = make_phantom(&PhantomSpec::random_anatomy(u64::from(seed)), size)?;
    let clean = radon(&phantom, geometry.n_angles, geometry.n_detectors)?.scaled(geometry.attenuation_scale);
    let dose = DoseModel {
        dose_fraction,
        seed: u64::from(seed),
        ..DoseModel::default()
    };
    let noisy = simulate_low_dose(&clean, &dose)?;
    let scale = geometry.attenuation_scale;
    Ok(Acquisition {
        ndct: fbp_slice(&clean, ReconFilter::RamLak, size, scale, "ndct")?,
        ldct: fbp_slice(&noisy, ReconFilter::RamLak, size, scale, "ldct")?,
        smooth: fbp_slice(&noisy, ReconFilter::Hann, size, scale, "smooth")?,
    })
}

/// Grayscale slice to canvas RGBA bytes, mapping `[lo, hi]` to black..white.
pub fn to_rgba(slice: &ImageSlice, lo: f64, hi: f64) -> Vec<u8> {
    let span = (hi - lo).max(f64::EPSILON);
    slice
        .pixels()
        .iter()
        .flat_map(|&v| {
            let g = ((f64::from(v) - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8;
            [g, g, g, 255]
        })
        .collect()
}

fn network_named(name: &str) -> Option<NetworkSpec> {
    match name {
        "drl" => Some(build_drl(1)),
        "cnn10" => Some(build_cnn10(1)),
        _ => None,
    }
}

/// How strongly each input pixel feeds the center output pixel, measured as
/// the impulse response of the network with every kernel weight set to 1.
/// Returned as a `side x side` map with `side` the receptive field, scaled
/// logarithmically into `[0, 1]`.
pub fn footprint(spec: &NetworkSpec) -> cascade_ct::Result<(usize, Vec<f64>)> {
    let side = spec.receptive_field();
    let mut params: Params<f64> = Params::from_store(spec, &spec.init_weights(0))?;
    for (slot, values) in params.slots.iter().zip(params.values.iter_mut()) {
        let fill = if slot.name.ends_with("kernel") { 1.0 } else { 0.0 };
        if slot.name.ends_with("kernel") || slot.name.ends_with("bias") {
            values.iter_mut().for_each(|v| *v = fill);
        }
    }
    let mut impulse = Tensor::zeros([1, spec.input_channels, side, side]);
    for c in 0..spec.input_channels {
        impulse.data_mut()[c * side * side + side * side / 2] = 1.0;
    }
    let response = Network::new(spec, &params).forward(&impulse, BnMode::Inference)?;
    let logs: Vec<f64> = response.data().iter().map(|v| v.abs().ln_1p()).collect();
    let peak = logs.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    Ok((side, logs.iter().map(|v| v / peak).collect()))
}

fn js_err(e: cascade_ct::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// State behind the dose and blending controls.
#[wasm_bindgen]
pub struct Demo {
    size: usize,
    current: Acquisition,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, dose_fraction: f64, seed: u32) -> Result<Demo, JsError> {
        Ok(Demo {
            size,
            current: acquire(size, dose_fraction, seed).map_err(js_err)?,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Re-simulates the slice at a new dose fraction and seed.
    pub fn simulate(&mut self, dose_fraction: f64, seed: u32) -> Result<(), JsError> {
        self.current = acquire(self.size, dose_fraction, seed).map_err(js_err)?;
        Ok(())
    }

    pub fn ndct_rgba(&self) -> Vec<u8> {
        to_rgba(&self.current.ndct, 0.0, 1.0)
    }

    pub fn ldct_rgba(&self) -> Vec<u8> {
        to_rgba(&self.current.ldct, 0.0, 1.0)
    }

    pub fn ldct_psnr(&self) -> f64 {
        psnr(&self.current.ldct, &self.current.ndct, 1.0).unwrap_or(f64::NAN)
    }

    fn blended(&self, w_ldct: f64) -> Result<ImageSlice, JsError> {
        blend(&self.current.ldct, &self.current.smooth, w_ldct, 1.0 - w_ldct).map_err(js_err)
    }

    /// LDCT weighted by `w_ldct`, the smoothed reconstruction by the rest.
    pub fn blend_rgba(&self, w_ldct: f64) -> Result<Vec<u8>, JsError> {
        Ok(to_rgba(&self.blended(w_ldct)?, 0.0, 1.0))
    }

    /// `[psnr_db, ssim]` of the blend against the clean reference.
    pub fn blend_scores(&self, w_ldct: f64) -> Result<Vec<f64>, JsError> {
        let b = self.blended(w_ldct)?;
        Ok(vec![
            psnr(&b, &self.current.ndct, 1.0).map_err(js_err)?,
            ssim(&b, &self.current.ndct, 1.0).map_err(js_err)?,
        ])
    }
}

/// Receptive field summary for `"drl"` or `"cnn10"`.
#[wasm_bindgen]
pub struct Footprint {
    side: usize,
    trainable: usize,
    total: usize,
    map: Vec<f64>,
}

#[wasm_bindgen]
impl Footprint {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn trainable_params(&self) -> usize {
        self.trainable
    }

    pub fn total_params(&self) -> usize {
        self.total
    }

    /// Heat map as RGBA, one pixel per input position.
    pub fn rgba(&self) -> Vec<u8> {
        self.map
            .iter()
            .flat_map(|&t| {
                let t = t.clamp(0.0, 1.0);
                [
                    (255.0 * t) as u8,
                    (255.0 * t * t) as u8,
                    (255.0 * (1.0 - t) * 0.6) as u8,
                    255,
                ]
            })
            .collect()
    }
}

#[wasm_bindgen]
pub fn receptive_field(network: &str) -> Result<Footprint, JsError> {
    let spec = network_named(network).ok_or_else(|| JsError::new(&format!("unknown network {network:?}")))?;
    let (side, map) = footprint(&spec).map_err(js_err)?;
    let count = param_count(&spec);
    Ok(Footprint {
        side,
        trainable: count.trainable,
        total: count.total,
        map,
    })
}
