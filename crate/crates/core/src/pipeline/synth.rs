//! Seeded synthetic micrograph stacks with known good/junk labels.
//!
//! Good images share a bright, low-noise ice level carrying smooth Gaussian
//! "particles" at random positions. Junk images are either uniform noise or a
//! carbon-film style intensity gradient. All pixel values are f32-exact so a
//! stack survives a float32 MRC round trip bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::ingest::{io_err, write_mrc, write_raw_dir, ByteOrder, ImageRecord, IngestError};

pub const TRUTH_FILE: &str = "truth.csv";
pub const MIN_DIM: usize = 4;
const MRC_STEM: &str = "stack";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthLabel {
    Good,
    Junk,
}

impl TruthLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TruthLabel::Good => "good",
            TruthLabel::Junk => "junk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub good: usize,
    pub junk: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone)]
pub struct SynthStack {
    pub images: Vec<ImageRecord>,
    /// Parallel to `images`.
    pub truth: Vec<TruthLabel>,
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("image dimensions must be at least {MIN_DIM}x{MIN_DIM}, got {0}x{1}")]
    TooSmall(usize, usize),
    #[error("stack must contain at least one image")]
    Empty,
    #[error(transparent)]
    Io(#[from] IngestError),
}

const NOISE_SIGMA: f64 = 0.05;
const ICE_LEVEL: f64 = 3.0;

fn good_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<f64> {
    let noise = Normal::new(0.0, NOISE_SIGMA).unwrap();
    let scale = w.min(h) as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(3..=6))
        .map(|_| {
            (
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.06..0.12) * scale,
                rng.gen_range(0.6..1.0),
            )
        })
        .collect();
    let mut px = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let mut v = ICE_LEVEL;
            for &(cx, cy, sigma, amp) in &blobs {
                let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
                v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            px.push(v + noise.sample(rng));
        }
    }
    px
}

fn noise_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<f64> {
    (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn carbon_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<f64> {
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let amp = rng.gen_range(1.0..2.0);
    let offset = rng.gen_range(-0.5..0.5);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let half = (cx * cx + cy * cy).sqrt();
    let mut px = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let t = ((c as f64 - cx) * dx + (r as f64 - cy) * dy) / half;
            px.push(offset + amp * t);
        }
    }
    px
}

/// Generates the stack in memory. Junk alternates between noise and carbon
/// and is shuffled among the good images; ids are `img_NNNN` in output order.
pub fn synth_gen(spec: &SynthSpec) -> Result<SynthStack, SynthError> {
    if spec.width < MIN_DIM || spec.height < MIN_DIM {
        return Err(SynthError::TooSmall(spec.width, spec.height));
    }
    let total = spec.good + spec.junk;
    if total == 0 {
        return Err(SynthError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<TruthLabel> = std::iter::repeat_n(TruthLabel::Good, spec.good)
        .chain(std::iter::repeat_n(TruthLabel::Junk, spec.junk))
        .collect();
    labels.shuffle(&mut rng);

    let (w, h) = (spec.width, spec.height);
    let mut junk_seen = 0;
    let images = labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let px = match label {
                TruthLabel::Good => good_image(&mut rng, w, h),
                TruthLabel::Junk => {
                    junk_seen += 1;
                    if junk_seen % 2 == 1 {
                        noise_image(&mut rng, w, h)
                    } else {
                        carbon_image(&mut rng, w, h)
                    }
                }
            };
            let px = px.into_iter().map(|v| v as f32 as f64).collect();
            ImageRecord::new(format!("img_{i:04}"), w, h, px)
                .map(|r| r.with_source("", 0, (w * h * 4) as u64))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SynthStack {
        images,
        truth: labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthFormat {
    /// One float32 MRC stack, `stack.mrc`.
    Mrc,
    /// Headerless float64 files plus `manifest.csv`.
    Raw,
}

/// Writes the stack and `truth.csv` (`id,label`) under `out`; returns the
/// path to feed back into ingest. Truth ids are the ids ingest will assign,
/// so `stack_f<z>` for MRC output.
pub fn write_stack(
    stack: &SynthStack,
    out: impl AsRef<Path>,
    format: SynthFormat,
) -> Result<PathBuf, SynthError> {
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(io_err(out))?;
    let (input, ids) = match format {
        SynthFormat::Mrc => {
            let path = out.join(format!("{MRC_STEM}.mrc"));
            write_mrc(&path, &stack.images, ByteOrder::Little)?;
            let ids = (0..stack.images.len())
                .map(|z| format!("{MRC_STEM}_f{z}"))
                .collect();
            (path, ids)
        }
        SynthFormat::Raw => (
            write_raw_dir(out, &stack.images)?,
            stack
                .images
                .iter()
                .map(|i| i.id.clone())
                .collect::<Vec<_>>(),
        ),
    };
    let mut truth = String::from("id,label\n");
    for (id, label) in ids.iter().zip(&stack.truth) {
        truth.push_str(&format!("{id},{}\n", label.as_str()));
    }
    let path = out.join(TRUTH_FILE);
    fs::write(&path, truth).map_err(io_err(&path))?;
    Ok(input)
}

impl SynthStack {
    pub fn junk_ids(&self) -> Vec<&str> {
        self.images
            .iter()
            .zip(&self.truth)
            .filter(|(_, l)| **l == TruthLabel::Junk)
            .map(|(i, _)| i.id.as_str())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::load_mrc;

    fn spec(seed: u64, good: usize, junk: usize) -> SynthSpec {
        SynthSpec {
            seed,
            good,
            junk,
            width: 16,
            height: 12,
        }
    }

    #[test]
    fn seeded_output_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_stack(
            &synth_gen(&spec(7, 10, 3)).unwrap(),
            dir.path().join("a"),
            SynthFormat::Mrc,
        )
        .unwrap();
        let b = write_stack(
            &synth_gen(&spec(7, 10, 3)).unwrap(),
            dir.path().join("b"),
            SynthFormat::Mrc,
        )
        .unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        assert_eq!(
            fs::read(dir.path().join("a").join(TRUTH_FILE)).unwrap(),
            fs::read(dir.path().join("b").join(TRUTH_FILE)).unwrap()
        );
    }

    #[test]
    fn no_junk_requested() {
        let s = synth_gen(&spec(1, 8, 0)).unwrap();
        assert!(s.truth.iter().all(|l| *l == TruthLabel::Good));
        assert!(s.junk_ids().is_empty());
    }

    #[test]
    fn mrc_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stack = synth_gen(&spec(3, 5, 2)).unwrap();
        let path = write_stack(&stack, dir.path(), SynthFormat::Mrc).unwrap();
        let back = load_mrc(&path).unwrap();
        assert_eq!(back.len(), 7);
        for (a, b) in stack.images.iter().zip(&back) {
            let (va, vb) = (
                crate::ingest::image_to_vector(a),
                crate::ingest::image_to_vector(b),
            );
            assert!(va.iter().zip(&vb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(matches!(synth_gen(&spec(0, 0, 0)), Err(SynthError::Empty)));
        let tiny = SynthSpec {
            width: 3,
            ..spec(0, 1, 0)
        };
        assert!(matches!(synth_gen(&tiny), Err(SynthError::TooSmall(3, 12))));
    }
}
