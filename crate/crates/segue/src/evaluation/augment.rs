//! Attacker-side data augmentations. Every function keeps pixels inside
//! [0, 1] and only ever touches the train batch it is given — the clean
//! test split never passes through here.
//!
//! Label handling is uniform: batches travel with a full target
//! distribution per sample (one-hot until a mixing augmentation blends
//! rows), so the training loop needs a single soft-label loss path.

use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distortion;
use crate::{Result, SegueError};

/// The augmentation menu.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Cutout,
    Mixup,
    Cutmix,
    GaussianBlur,
}

impl std::str::FromStr for Augmentation {
    type Err = SegueError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cutout" => Ok(Augmentation::Cutout),
            "mixup" => Ok(Augmentation::Mixup),
            "cutmix" => Ok(Augmentation::Cutmix),
            "gaussian_blur" => Ok(Augmentation::GaussianBlur),
            other => Err(SegueError::Config(format!(
                "unknown augmentation '{other}' (expected cutout, mixup, cutmix, gaussian_blur)"
            ))),
        }
    }
}

/// One-hot matrix for integer labels.
pub fn one_hot(labels: &[u32], num_classes: usize) -> Array2<f64> {
    let mut t = Array2::zeros((labels.len(), num_classes));
    for (i, &y) in labels.iter().enumerate() {
        t[[i, y as usize]] = 1.0;
    }
    t
}

/// Zero `n_patches` random `length`-sided squares per image. Patches are
/// placed fully inside the image, so `length = H` blanks the whole image.
pub fn cutout(x: &mut Array4<f64>, n_patches: usize, length: usize, rng: &mut ChaCha8Rng) {
    let (n, _c, h, w) = x.dim();
    if length == 0 {
        return;
    }
    let length = length.min(h).min(w);
    for i in 0..n {
        for _ in 0..n_patches {
            let top = rng.random_range(0..=h - length);
            let left = rng.random_range(0..=w - length);
            x.slice_mut(s![i, .., top..top + length, left..left + length])
                .fill(0.0);
        }
    }
}

/// Mixup: blend every image with a random partner, `lambda ~ Beta(1,1)`
/// drawn once per batch, and blend the target rows identically.
pub fn mixup(
    x: &mut Array4<f64>,
    targets: &mut Array2<f64>,
    rng: &mut ChaCha8Rng,
) {
    let n = x.dim().0;
    if n < 2 {
        return;
    }
    // Beta(1,1) is the uniform distribution on [0,1].
    let lambda: f64 = rng.random_range(0.0..=1.0);
    let mut partner: Vec<usize> = (0..n).collect();
    partner.shuffle(rng);
    let x0 = x.clone();
    let t0 = targets.clone();
    for i in 0..n {
        let j = partner[i];
        let xi = &x0.index_axis(Axis(0), i) * lambda
            + &x0.index_axis(Axis(0), j) * (1.0 - lambda);
        x.index_axis_mut(Axis(0), i).assign(&xi);
        let ti =
            &t0.index_axis(Axis(0), i) * lambda + &t0.index_axis(Axis(0), j) * (1.0 - lambda);
        targets.index_axis_mut(Axis(0), i).assign(&ti);
    }
}

/// Cutmix: paste a random partner's pixels into one random rectangle per
/// image and weight the target rows by exact pixel share. The rectangle
/// side is `round(side * sqrt(1 - lambda))` per axis with
/// `lambda ~ Beta(1,1)`, placed fully inside the image.
pub fn cutmix(
    x: &mut Array4<f64>,
    targets: &mut Array2<f64>,
    rng: &mut ChaCha8Rng,
) {
    let (n, _c, h, w) = x.dim();
    if n < 2 {
        return;
    }
    let lambda: f64 = rng.random_range(0.0..=1.0);
    let cut = (1.0 - lambda).sqrt();
    let ph = ((h as f64 * cut).round() as usize).min(h);
    let pw = ((w as f64 * cut).round() as usize).min(w);
    let mut partner: Vec<usize> = (0..n).collect();
    partner.shuffle(rng);
    if ph == 0 || pw == 0 {
        return;
    }
    let x0 = x.clone();
    let t0 = targets.clone();
    let area = (ph * pw) as f64 / (h * w) as f64;
    for i in 0..n {
        let j = partner[i];
        let top = rng.random_range(0..=h - ph);
        let left = rng.random_range(0..=w - pw);
        let patch = x0
            .index_axis(Axis(0), j)
            .slice(s![.., top..top + ph, left..left + pw])
            .to_owned();
        x.slice_mut(s![i, .., top..top + ph, left..left + pw]).assign(&patch);
        let ti =
            &t0.index_axis(Axis(0), i) * (1.0 - area) + &t0.index_axis(Axis(0), j) * area;
        targets.index_axis_mut(Axis(0), i).assign(&ti);
    }
}

/// Gaussian blur with a 3x3 kernel at sigma 1.0 — strong enough to count
/// as a countermeasure, unlike the distortion layer's near-identity blur.
pub fn gaussian_blur_batch(x: &Array4<f64>) -> Array4<f64> {
    distortion::gaussian_blur(x, (3, 3), 1.0).mapv(|v| v.clamp(0.0, 1.0))
}

/// Apply a list of augmentations in order, tracking targets throughout.
pub fn apply_augmentations(
    augs: &[Augmentation],
    x: &mut Array4<f64>,
    targets: &mut Array2<f64>,
    rng: &mut ChaCha8Rng,
) {
    let h = x.dim().2;
    for aug in augs {
        match aug {
            Augmentation::Cutout => cutout(x, 2, (h / 2).max(1), rng),
            Augmentation::Mixup => mixup(x, targets, rng),
            Augmentation::Cutmix => cutmix(x, targets, rng),
            Augmentation::GaussianBlur => *x = gaussian_blur_batch(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng::rng_for;
    use rand::Rng as _;

    fn random_batch(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut rng = rng_for(seed, "augment-test");
        Array4::from_shape_fn((n, c, h, w), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn augmentation_names_parse_and_reject() {
        assert_eq!("cutout".parse::<Augmentation>().unwrap(), Augmentation::Cutout);
        assert_eq!("mixup".parse::<Augmentation>().unwrap(), Augmentation::Mixup);
        assert_eq!("cutmix".parse::<Augmentation>().unwrap(), Augmentation::Cutmix);
        assert_eq!(
            "gaussian_blur".parse::<Augmentation>().unwrap(),
            Augmentation::GaussianBlur
        );
        assert!("solarize".parse::<Augmentation>().is_err());
    }

    #[test]
    fn cutout_full_length_blanks_the_whole_image() {
        let mut x = random_batch(3, 2, 8, 8, 1);
        let mut rng = rng_for(2, "cutout");
        cutout(&mut x, 1, 8, &mut rng);
        assert!(x.iter().all(|&v| v == 0.0), "length = H must zero everything");
    }

    #[test]
    fn cutout_zeroes_exactly_one_square_when_patches_do_not_overlap() {
        let mut x = Array4::<f64>::ones((1, 1, 16, 16));
        let mut rng = rng_for(3, "cutout-one");
        cutout(&mut x, 1, 4, &mut rng);
        let zeros = x.iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 16, "one 4x4 patch must zero exactly 16 pixels");
        assert!(x.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn mixup_preserves_target_row_sums_and_pixel_range() {
        let mut x = random_batch(6, 3, 8, 8, 4);
        let mut t = one_hot(&[0, 1, 2, 0, 1, 2], 3);
        let mut rng = rng_for(5, "mixup");
        mixup(&mut x, &mut t, &mut rng);
        for (i, row) in t.axis_iter(Axis(0)).enumerate() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {i} target mass must stay 1, got {sum}");
        }
        assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)), "pixels must stay in range");
    }

    #[test]
    fn cutmix_label_weights_equal_exact_pixel_share() {
        // Two constant images make the mixed area directly countable.
        let mut x = Array4::<f64>::zeros((2, 1, 8, 8));
        x.slice_mut(s![1, .., .., ..]).fill(1.0);
        let mut t = one_hot(&[0, 1], 2);
        let mut rng = rng_for(6, "cutmix");
        cutmix(&mut x, &mut t, &mut rng);
        for i in 0..2 {
            let filled: f64 = match i {
                0 => x.index_axis(Axis(0), 0).iter().filter(|&&v| v == 1.0).count() as f64,
                _ => x.index_axis(Axis(0), 1).iter().filter(|&&v| v == 0.0).count() as f64,
            };
            let foreign_share = filled / 64.0;
            // Row i keeps (1 - a) of its own label where a is the share of
            // foreign pixels pasted in; with a same-image partner the paste
            // is invisible and the weight update still uses the drawn area,
            // so only check rows whose partner differs (foreign pixels > 0).
            if foreign_share > 0.0 {
                let own = t[[i, i]];
                assert!(
                    (own - (1.0 - foreign_share)).abs() < 1e-12,
                    "row {i}: own-label weight {own} vs 1 - pixel share {foreign_share}"
                );
            }
        }
    }

    #[test]
    fn blur_augmentation_smooths_but_stays_in_range() {
        let mut x = Array4::<f64>::zeros((1, 1, 9, 9));
        x[[0, 0, 4, 4]] = 1.0;
        let y = gaussian_blur_batch(&x);
        assert!(y[[0, 0, 4, 4]] < 1.0, "a spike must lose mass to neighbours");
        assert!(y[[0, 0, 4, 3]] > 0.0, "neighbours must gain mass");
        assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let sum_before: f64 = x.sum();
        let sum_after: f64 = y.sum();
        assert!(
            (sum_before - sum_after).abs() < 1e-9,
            "replicate-padded blur preserves total mass away from borders"
        );
    }

    #[test]
    fn augmentation_chain_is_deterministic_per_seed() {
        let augs = [Augmentation::Cutout, Augmentation::Mixup, Augmentation::GaussianBlur];
        let run = || {
            let mut x = random_batch(4, 3, 8, 8, 7);
            let mut t = one_hot(&[0, 1, 0, 1], 2);
            let mut rng = rng_for(8, "chain");
            apply_augmentations(&augs, &mut x, &mut t, &mut rng);
            (x, t)
        };
        let (x1, t1) = run();
        let (x2, t2) = run();
        assert_eq!(x1, x2, "same seed must give identical augmented pixels");
        assert_eq!(t1, t2, "same seed must give identical targets");
    }
}
