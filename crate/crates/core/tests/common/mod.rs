#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;

use pim_aging::aging::LayerMask;
use pim_aging::data::{mnist_paths, write_idx, Dataset, Split};
use pim_aging::pim_sim::{layer_forward_bitexact, layer_forward_functional, Activation, PimConfig};
use pim_aging::quantize::{code_limit, BitPlanes, InputPlanes};
use pim_aging::seed;

/// MNIST directory: `$MNIST_DIR`, else `<workspace>/data/mnist`.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn mnist_available() -> bool {
    let dir = mnist_dir();
    [Split::Train, Split::Test].iter().all(|&s| {
        let (i, l) = mnist_paths(&dir, s);
        i.exists() && l.exists()
    })
}

/// Small learnable synthetic set: class `k` lights up a band of pixels.
pub fn synthetic(count: usize, side: usize, classes: usize, split: Split, seed_value: u64) -> Dataset {
    let mut rng = seed::rng(seed_value);
    let feats = side * side;
    let mut images = Array2::<u8>::zeros((count, feats));
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let y = i % classes;
        for p in 0..feats {
            let on = p * classes / feats == y;
            let base: u8 = if on { 200 } else { 10 };
            images[(i, p)] = base.saturating_add(rng.random_range(0..40));
        }
        labels.push(y as u8);
    }
    Dataset::new(images, labels, side, side, split).unwrap()
}

/// Write a synthetic train/test pair in MNIST file layout under `dir`.
pub fn write_synthetic_mnist(dir: &Path, side: usize) {
    for (split, count, s) in [(Split::Train, 600, 1), (Split::Test, 200, 2)] {
        let ds = synthetic(count, side, 10, split, s);
        let (i, l) = mnist_paths(dir, split);
        write_idx(&ds, &i, &l).unwrap();
    }
}

pub struct Instance {
    pub input: InputPlanes,
    pub weights: BitPlanes,
    pub mask: Option<LayerMask>,
}

/// Random layer with at most 64 fan-in rows per tile, so no per-tile sample
/// can leave the default ADC range.
pub fn random_instance<R: Rng>(rng: &mut R, aged: bool) -> Instance {
    let q = rng.random_range(1..=4u32);
    let n = rng.random_range(1..=4u32);
    let rows = rng.random_range(1..=150usize);
    let cols = rng.random_range(1..=6usize);
    let batch = rng.random_range(1..=4usize);
    let lim = code_limit(q);
    let codes = Array2::from_shape_simple_fn((rows, cols), || 2 * rng.random_range(0..=lim) - lim);
    let weights = BitPlanes::from_codes(codes.view(), q, 1.0).unwrap();
    let top = code_limit(n) as u32;
    let values = Array2::from_shape_simple_fn((batch, rows), || rng.random_range(0..=top));
    let input = InputPlanes::from_values(values, n).unwrap();
    let mask = aged.then(|| {
        let planes = (0..q)
            .map(|_| {
                Array2::from_shape_simple_fn((rows, cols), || {
                    if rng.random_bool(0.6) {
                        rng.random_range(0.05f32..1.0)
                    } else {
                        1.0
                    }
                })
            })
            .collect();
        LayerMask::new(planes).unwrap()
    });
    Instance { input, weights, mask }
}

/// Outcome of one instance: `Ok(())` or a description of the violation.
pub fn check_instance(inst: &Instance) -> Result<(), String> {
    let q = inst.weights.q();
    let n = inst.input.n();
    let cfg = PimConfig::default().with_bits(q, n);
    let bias = Array1::<f32>::zeros(inst.weights.cols());
    let be = layer_forward_bitexact(
        &inst.input,
        &inst.weights,
        inst.mask.as_ref(),
        bias.view(),
        &cfg,
        Activation::Identity,
    )
    .map_err(|e| e.to_string())?;
    if be.saturated != 0 {
        return Err(format!("{} saturated samples", be.saturated));
    }
    match &inst.mask {
        None => {
            let fx = layer_forward_functional(
                inst.input.to_f32().view(),
                &inst.weights,
                None,
                bias.view(),
                &cfg,
                Activation::Identity,
            )
            .map_err(|e| e.to_string())?;
            if fx.pre != be.pre {
                return Err(format!("unaged mismatch: {:?} vs {:?}", be.pre, fx.pre));
            }
        }
        Some(mask) => {
            // floor-free lumped value in f64
            let rows = inst.weights.rows();
            let tiles = rows.div_ceil(cfg.array_rows) as f64;
            let bound = tiles * (code_limit(q) as f64) * (code_limit(n) as f64);
            let x = inst.input.values().mapv(f64::from);
            let mut w = Array2::<f64>::zeros(inst.weights.dim());
            for i in 0..q as usize {
                let sig = (1u64 << i) as f64;
                ndarray::Zip::from(&mut w)
                    .and(inst.weights.plane(i))
                    .and(mask.plane(i))
                    .for_each(|o, &b, &d| *o += sig * f64::from(b) * f64::from(d));
            }
            let real = x.dot(&w) * cfg.lsb_per_cell();
            for (&b, &r) in be.pre.iter().zip(real.iter()) {
                let dev = (b as f64 - r).abs();
                if dev > bound + 1e-6 {
                    return Err(format!("deviation {dev} exceeds bound {bound}"));
                }
            }
        }
    }
    Ok(())
}

/// Run `count` unaged and `count` aged random instances from `seed_value`.
pub fn fidelity_suite(count: usize, seed_value: u64) -> Result<(), String> {
    let mut rng = seed::rng(seed_value);
    for k in 0..count {
        for aged in [false, true] {
            let inst = random_instance(&mut rng, aged);
            check_instance(&inst).map_err(|e| format!("instance {k} (aged={aged}): {e}"))?;
        }
    }
    Ok(())
}
