//! Procedural shape dataset.
//!
//! Ten grayscale classes (bars at four orientations, disk, ring, plus,
//! saltire, double bar, square outline) rendered onto a small grid with
//! jittered position, scale, rotation and intensity plus Gaussian pixel
//! noise. The classes are linearly well separated, so a toy convnet reaches
//! high accuracy within a few epochs while remaining cheap to evaluate.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::Dataset;
use crate::diff::Tensor;
use crate::seed::stream_rng;

pub const SYNTH_CLASSES: u32 = 10;

struct Params {
    cx: f64,
    cy: f64,
    half: f64,
    theta: f64,
    intensity: f64,
    thick: f64,
}

fn rot(dx: f64, dy: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * dx + s * dy, -s * dx + c * dy)
}

fn bar(dx: f64, dy: f64, p: &Params, theta: f64) -> bool {
    let (rx, ry) = rot(dx, dy, theta);
    ry.abs() <= p.thick && rx.abs() <= p.half
}

fn paint(class: u32, dx: f64, dy: f64, p: &Params) -> bool {
    let r = (dx * dx + dy * dy).sqrt();
    match class {
        0 => bar(dx, dy, p, p.theta),
        1 => bar(dx, dy, p, p.theta + std::f64::consts::FRAC_PI_2),
        2 => bar(dx, dy, p, p.theta + std::f64::consts::FRAC_PI_4),
        3 => bar(dx, dy, p, p.theta - std::f64::consts::FRAC_PI_4),
        4 => r <= p.half * 0.8,
        5 => (r - p.half * 0.7).abs() <= p.thick,
        6 => bar(dx, dy, p, p.theta) || bar(dx, dy, p, p.theta + std::f64::consts::FRAC_PI_2),
        7 => {
            bar(dx, dy, p, p.theta + std::f64::consts::FRAC_PI_4)
                || bar(dx, dy, p, p.theta - std::f64::consts::FRAC_PI_4)
        }
        8 => {
            let (rx, ry) = rot(dx, dy, p.theta);
            rx.abs() <= p.half && ((ry - 0.55 * p.half).abs() <= p.thick * 0.8 || (ry + 0.55 * p.half).abs() <= p.thick * 0.8)
        }
        9 => {
            let (rx, ry) = rot(dx, dy, p.theta);
            let m = rx.abs().max(ry.abs());
            m <= p.half * 0.85 && m >= p.half * 0.85 - 2.0 * p.thick
        }
        _ => unreachable!("class out of range"),
    }
}

/// Renders `per_class` samples for each of the ten classes at the given
/// square resolution, class-major (all of class 0 first, then class 1, ...).
/// Each class draws from its own seed stream, so the content of class `k` is
/// independent of `per_class` for the other classes.
pub fn synth_dataset(seed: u64, per_class: usize, channels: usize, resolution: usize) -> Dataset {
    let r = resolution as f64;
    let pos = Uniform::new_inclusive(-0.09 * r, 0.09 * r);
    let scale = Uniform::new_inclusive(0.7, 1.0);
    let tilt = Uniform::new_inclusive(-0.12, 0.12);
    let bright = Uniform::new_inclusive(0.7, 1.0);
    let noise = Normal::new(0.0, 0.08).expect("valid std");

    let mut data = Vec::with_capacity(SYNTH_CLASSES as usize * per_class * channels * resolution * resolution);
    let mut labels = Vec::with_capacity(SYNTH_CLASSES as usize * per_class);
    for class in 0..SYNTH_CLASSES {
        let mut rng = stream_rng(seed, "synth-class", class as u64);
        for _ in 0..per_class {
            let p = Params {
                cx: (r - 1.0) / 2.0 + pos.sample(&mut rng),
                cy: (r - 1.0) / 2.0 + pos.sample(&mut rng),
                half: 0.36 * r * scale.sample(&mut rng),
                theta: tilt.sample(&mut rng),
                intensity: bright.sample(&mut rng),
                thick: (0.085 * r).max(1.1),
            };
            let mut canvas = vec![0f32; resolution * resolution];
            for y in 0..resolution {
                for x in 0..resolution {
                    let on = paint(class, x as f64 - p.cx, y as f64 - p.cy, &p);
                    let base = if on { p.intensity } else { 0.0 };
                    let v = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    canvas[y * resolution + x] = v as f32;
                }
            }
            for _ in 0..channels {
                data.extend_from_slice(&canvas);
            }
            labels.push(class);
        }
    }
    Dataset {
        images: Tensor::new(
            vec![SYNTH_CLASSES as usize * per_class, channels, resolution, resolution],
            data,
        )
        .expect("sized"),
        labels,
        num_classes: SYNTH_CLASSES,
    }
}

/// Splits per class: the first `round(n_k * train_frac)` samples of each
/// class go to the train set, the rest to the validation set. Order within
/// each side stays class-major.
pub fn stratified_split(ds: &Dataset, train_frac: f64) -> (Dataset, Dataset) {
    assert!((0.0..=1.0).contains(&train_frac), "train_frac must be in [0,1]");
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes as usize];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for members in &by_class {
        let n_train = (members.len() as f64 * train_frac).round() as usize;
        train.extend_from_slice(&members[..n_train]);
        val.extend_from_slice(&members[n_train..]);
    }
    (ds.select(&train), ds.select(&val))
}

/// Deterministically shuffles sample indices for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, "epoch-shuffle", epoch as u64);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}
