//! Scale-biased synthetic segmentation data.
//!
//! Every sample is a 1x32x32 image with 1-3 soft-edged discs on a zero
//! background plus clipped Gaussian noise, and a binary mask of the disc
//! pixels. Subset `S` draws radii from a small range, subset `L` from a
//! disjoint large range, and the mixture `X` interleaves the two while
//! keeping the subset label for evaluation.

mod cache;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, substream, Stream};

pub use cache::{read_cache, write_cache, CacheManifest, CACHE_MAGIC, CACHE_VERSION};

pub const IMAGE_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subset {
    S = 0,
    L = 1,
}

/// What to generate: one of the pure subsets or the mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubsetKind {
    S,
    L,
    X,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub sample_id: u64,
    /// `(1, 32, 32)`, values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major labels, 0 background and 1 foreground.
    pub mask: Vec<u8>,
    pub true_subset: Subset,
}

impl SynthSample {
    pub fn foreground_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_pixels() as f64 / self.mask.len() as f64
    }

    pub fn labels(&self) -> Vec<usize> {
        self.mask.iter().map(|&m| m as usize).collect()
    }

    /// Mirror image and mask left-to-right.
    pub fn flipped(&self) -> Self {
        let (h, w) = (IMAGE_SIZE, IMAGE_SIZE);
        let mut image = self.image.clone();
        let mut mask = self.mask.clone();
        for y in 0..h {
            image.data_mut()[y * w..(y + 1) * w].reverse();
            mask[y * w..(y + 1) * w].reverse();
        }
        Self {
            image,
            mask,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    /// Fraction of `S`-type samples in `X`.
    pub mix: f64,
    pub radius_small: (f64, f64),
    pub radius_large: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 1024,
            n_val: 256,
            mix: 0.5,
            radius_small: (2.0, 4.0),
            radius_large: (8.0, 12.0),
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let check_range = |field: &str, (lo, hi): (f64, f64)| -> Result<()> {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return Err(Error::config(field, format!("invalid radius range [{lo}, {hi}]")));
            }
            if 2.0 * hi > IMAGE_SIZE as f64 {
                return Err(Error::config(field, "discs must fit inside the image"));
            }
            Ok(())
        };
        check_range("radius_small", self.radius_small)?;
        check_range("radius_large", self.radius_large)?;
        if self.radius_small.1 >= self.radius_large.0 {
            return Err(Error::config(
                "radius_large",
                "radius ranges must be disjoint with small below large",
            ));
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(Error::config("mix", "must lie in [0, 1]"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("noise_std", "must be finite and >= 0"));
        }
        if self.n_train == 0 {
            return Err(Error::config("n_train", "must be positive"));
        }
        if self.n_val == 0 {
            return Err(Error::config("n_val", "must be positive"));
        }
        Ok(())
    }

    fn radius_range(&self, subset: Subset) -> (f64, f64) {
        match subset {
            Subset::S => self.radius_small,
            Subset::L => self.radius_large,
        }
    }

    fn count(&self, split: SplitKind) -> usize {
        match split {
            SplitKind::Train => self.n_train,
            SplitKind::Val => self.n_val,
        }
    }
}

/// Subset of sample `i` in the mixture: `S` exactly when the running count
/// `floor((i + 1) * mix)` steps up, which spreads `floor(n * mix)` S-type
/// samples evenly through the sequence.
pub fn mixture_subset(i: usize, mix: f64) -> Subset {
    let before = (i as f64 * mix).floor();
    let after = ((i + 1) as f64 * mix).floor();
    if after > before {
        Subset::S
    } else {
        Subset::L
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Disc {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
}

/// Pixel `(y, x)` has its center at `(y + 0.5, x + 0.5)`. A pixel is
/// foreground when its center lies within the radius; intensity falls off
/// linearly over one pixel around the rim.
pub fn rasterize(discs: &[Disc], size: usize) -> (Vec<f64>, Vec<u8>) {
    let mut image = vec![0.0f64; size * size];
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            for d in discs {
                let dist = ((py - d.cy).powi(2) + (px - d.cx).powi(2)).sqrt();
                if dist <= d.radius {
                    mask[y * size + x] = 1;
                }
                let v = (d.radius + 0.5 - dist).clamp(0.0, 1.0);
                let slot = &mut image[y * size + x];
                *slot = slot.max(v);
            }
        }
    }
    (image, mask)
}

fn sample_tag(split: SplitKind, sample_id: u64) -> u64 {
    let split_bit = match split {
        SplitKind::Train => 0,
        SplitKind::Val => 1,
    };
    sample_id << 1 | split_bit
}

fn generate_one(spec: &DatasetSpec, split: SplitKind, sample_id: u64, subset: Subset) -> SynthSample {
    let mut rng = substream(spec.seed, Stream::Data, sample_tag(split, sample_id));
    let (lo, hi) = spec.radius_range(subset);
    let n_discs = rng.random_range(1..=3);
    let size = IMAGE_SIZE as f64;
    let discs: Vec<Disc> = (0..n_discs)
        .map(|_| {
            let radius = if hi > lo { rng.random_range(lo..hi) } else { lo };
            Disc {
                cy: rng.random_range(radius..=size - radius),
                cx: rng.random_range(radius..=size - radius),
                radius,
            }
        })
        .collect();
    let (mut image, mask) = rasterize(&discs, IMAGE_SIZE);
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
        for v in &mut image {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    SynthSample {
        sample_id,
        image: Tensor::new(vec![1, IMAGE_SIZE, IMAGE_SIZE], image).expect("image shape"),
        mask,
        true_subset: subset,
    }
}

/// All samples of `kind` for `split`. Content depends only on
/// `(spec.seed, split, sample_id)` and the subset's radius range.
pub fn generate(spec: &DatasetSpec, kind: SubsetKind, split: SplitKind) -> Vec<SynthSample> {
    (0..spec.count(split))
        .map(|i| {
            let subset = match kind {
                SubsetKind::S => Subset::S,
                SubsetKind::L => Subset::L,
                SubsetKind::X => mixture_subset(i, spec.mix),
            };
            generate_one(spec, split, i as u64, subset)
        })
        .collect()
}

/// Seed-independent identity of a sample's random stream, used to show
/// that different dataset seeds never reuse a stream.
pub fn sample_stream_id(spec: &DatasetSpec, split: SplitKind, sample_id: u64) -> u64 {
    derive_seed(spec.seed, Stream::Data, sample_tag(split, sample_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub count_s: usize,
    pub count_l: usize,
    pub mean_foreground_s: Option<f64>,
    pub mean_foreground_l: Option<f64>,
}

pub fn split_report(samples: &[SynthSample]) -> SplitReport {
    let mean_for = |subset: Subset| -> (usize, Option<f64>) {
        let fr: Vec<f64> = samples
            .iter()
            .filter(|s| s.true_subset == subset)
            .map(SynthSample::foreground_fraction)
            .collect();
        let mean = (!fr.is_empty()).then(|| fr.iter().sum::<f64>() / fr.len() as f64);
        (fr.len(), mean)
    };
    let (count_s, mean_foreground_s) = mean_for(Subset::S);
    let (count_l, mean_foreground_l) = mean_for(Subset::L);
    SplitReport {
        count_s,
        count_l,
        mean_foreground_s,
        mean_foreground_l,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            n_train: 64,
            n_val: 16,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        assert_eq!(
            generate(&spec, SubsetKind::X, SplitKind::Train),
            generate(&spec, SubsetKind::X, SplitKind::Train)
        );
    }

    #[test]
    fn mixture_ratio_is_exact() {
        let spec = DatasetSpec {
            n_train: 1000,
            ..DatasetSpec::default()
        };
        let x = generate(&spec, SubsetKind::X, SplitKind::Train);
        let r = split_report(&x);
        assert_eq!((r.count_s, r.count_l), (500, 500));
        let third = (0..999).filter(|&i| mixture_subset(i, 1.0 / 3.0) == Subset::S).count();
        assert_eq!(third, 333);
    }

    #[test]
    fn centered_disc_pixel_count() {
        // 32 pixel centers lie within radius 3 of the grid center
        let (img, mask) = rasterize(
            &[Disc {
                cy: 16.0,
                cx: 16.0,
                radius: 3.0,
            }],
            32,
        );
        assert_eq!(mask.iter().filter(|&&m| m == 1).count(), 32);
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn every_sample_has_foreground_and_valid_pixels() {
        let spec = small_spec();
        for kind in [SubsetKind::S, SubsetKind::L, SubsetKind::X] {
            for s in generate(&spec, kind, SplitKind::Val) {
                assert!(s.foreground_pixels() > 0);
                assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(s.image.shape(), &[1, 32, 32]);
            }
        }
    }

    #[test]
    fn pure_sets_and_ordering() {
        let spec = small_spec();
        let s = split_report(&generate(&spec, SubsetKind::S, SplitKind::Train));
        assert_eq!((s.count_s, s.count_l), (64, 0));
        let x = split_report(&generate(&spec, SubsetKind::X, SplitKind::Train));
        assert_eq!((x.count_s, x.count_l), (32, 32));
        assert!(x.mean_foreground_l.unwrap() > x.mean_foreground_s.unwrap());
    }

    #[test]
    fn size_threshold_separates_subsets() {
        let spec = DatasetSpec {
            noise_std: 0.0,
            ..small_spec()
        };
        let x = generate(&spec, SubsetKind::X, SplitKind::Train);
        // 3 small discs never cover more than 3 * pi * 4^2 pixels
        let threshold = 3.0 * std::f64::consts::PI * 16.0 + 10.0;
        let correct = x
            .iter()
            .filter(|s| (s.foreground_pixels() as f64 > threshold) == (s.true_subset == Subset::L))
            .count();
        assert_eq!(correct, x.len());
    }

    #[test]
    fn seeds_do_not_share_streams() {
        let a = DatasetSpec {
            seed: 1,
            ..small_spec()
        };
        let b = DatasetSpec {
            seed: 2,
            ..small_spec()
        };
        let ids_a: std::collections::HashSet<u64> =
            (0..64).map(|i| sample_stream_id(&a, SplitKind::Train, i)).collect();
        assert!((0..64).all(|i| !ids_a.contains(&sample_stream_id(&b, SplitKind::Train, i))));
        assert_ne!(
            generate(&a, SubsetKind::S, SplitKind::Train)[0],
            generate(&b, SubsetKind::S, SplitKind::Train)[0]
        );
    }

    #[test]
    fn flip_is_an_involution() {
        let s = &generate(&small_spec(), SubsetKind::L, SplitKind::Val)[3];
        assert_eq!(&s.flipped().flipped(), s);
        assert_eq!(s.flipped().foreground_pixels(), s.foreground_pixels());
    }

    #[test]
    fn spec_validation() {
        let overlapping = DatasetSpec {
            radius_small: (2.0, 9.0),
            ..DatasetSpec::default()
        };
        assert!(matches!(overlapping.validate(), Err(Error::Config { .. })));
        assert!(DatasetSpec::default().validate().is_ok());
    }
}
