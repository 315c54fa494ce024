use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, Result};
use crate::imaging::{crop, flip, gaussian_blur, resize_bilinear, rotate, BBox, FlipAxis, Image};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rotation90 {
    None,
    /// One of: no turn, clockwise, counterclockwise, chosen uniformly.
    Random,
}

/// Randomized augmentation recipe. Ranges are inclusive `(min, max)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub rotation_deg: (f64, f64),
    pub rotation90: Rotation90,
    pub blur_sigma: (f64, f64),
    /// Fraction of each side length removed by a centered crop.
    pub crop_frac: (f64, f64),
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self {
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            rotation_deg: (0.0, 0.0),
            rotation90: Rotation90::None,
            blur_sigma: (0.0, 0.0),
            crop_frac: (0.0, 0.0),
        }
    }

    /// Flip either axis with probability ½, rotate within ±15°, blur σ ∈ [0, 2.3].
    pub fn ripeness() -> Self {
        Self {
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            rotation_deg: (-15.0, 15.0),
            blur_sigma: (0.0, 2.3),
            ..Self::identity()
        }
    }

    /// Horizontal flip ½, random quarter turn, crop up to 20 %, blur σ ∈ [0, 2.5].
    pub fn disease() -> Self {
        Self {
            flip_h_prob: 0.5,
            rotation90: Rotation90::Random,
            crop_frac: (0.0, 0.2),
            blur_sigma: (0.0, 2.5),
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DatasetError::InvalidParameter(m));
        for (name, p) in [("flip_h_prob", self.flip_h_prob), ("flip_v_prob", self.flip_v_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0,1]"));
            }
        }
        for (name, (lo, hi)) in [
            ("rotation_deg", self.rotation_deg),
            ("blur_sigma", self.blur_sigma),
            ("crop_frac", self.crop_frac),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("{name} range ({lo}, {hi}) is not ordered"));
            }
        }
        if self.blur_sigma.0 < 0.0 {
            return bad("blur_sigma must be >= 0".into());
        }
        if self.crop_frac.0 < 0.0 || self.crop_frac.1 >= 1.0 {
            return bad("crop_frac must lie in [0,1)".into());
        }
        if self.rotation_deg.0 < -180.0 || self.rotation_deg.1 > 180.0 {
            return bad("rotation_deg must lie in [-180,180]".into());
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

/// Applies flips, quarter turn, free rotation, centered crop (resized back)
/// and blur, in that order. Every random draw happens regardless of the
/// spec, so a seed always consumes the same stream.
pub fn augment<S: Scalar>(image: &Image<S>, spec: &AugmentationSpec, seed: u64) -> Result<Image<S>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip_h = rng.random::<f64>() < spec.flip_h_prob;
    let flip_v = rng.random::<f64>() < spec.flip_v_prob;
    let turn = match rng.random_range(0..3u8) {
        1 => 90.0,
        2 => -90.0,
        _ => 0.0,
    };
    let angle = uniform(&mut rng, spec.rotation_deg);
    let crop_f = uniform(&mut rng, spec.crop_frac);
    let sigma = uniform(&mut rng, spec.blur_sigma);

    let mut out = image.clone();
    if flip_h {
        out = flip(&out, FlipAxis::Horizontal);
    }
    if flip_v {
        out = flip(&out, FlipAxis::Vertical);
    }
    if spec.rotation90 == Rotation90::Random && turn != 0.0 {
        out = rotate(&out, turn);
    }
    if angle != 0.0 {
        out = rotate(&out, angle);
    }
    if crop_f > 0.0 {
        let (w, h) = (out.width() as f64, out.height() as f64);
        let keep_w = (w * (1.0 - crop_f)).max(1.0);
        let keep_h = (h * (1.0 - crop_f)).max(1.0);
        let bbox = BBox::new((w - keep_w) / 2.0, (h - keep_h) / 2.0, keep_w, keep_h)?;
        out = resize_bilinear(&crop(&out, &bbox)?, image.width(), image.height())?;
    }
    if sigma > 0.0 {
        out = gaussian_blur(&out, sigma)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_image() -> Image<f32> {
        Image::from_fn(20, 14, 3, |x, y, c| ((x * 7 + y * 3 + c * 5) % 17) as f32 / 16.0).unwrap()
    }

    #[test]
    fn identity_spec_is_bit_exact() {
        let img = sample_image();
        for seed in 0..20 {
            assert_eq!(augment(&img, &AugmentationSpec::identity(), seed).unwrap(), img);
        }
    }

    #[test]
    fn recipes_keep_dimensions_and_are_seeded() {
        let img = sample_image();
        for spec in [AugmentationSpec::ripeness(), AugmentationSpec::disease()] {
            let a = augment(&img, &spec, 42).unwrap();
            assert_eq!((a.width(), a.height(), a.channels()), (20, 14, 3));
            assert_eq!(a, augment(&img, &spec, 42).unwrap());
        }
        let differs = (0..10).any(|s| {
            augment(&img, &AugmentationSpec::ripeness(), s).unwrap()
                != augment(&img, &AugmentationSpec::ripeness(), s + 100).unwrap()
        });
        assert!(differs);
    }

    #[test]
    fn invalid_specs_rejected() {
        let img = sample_image();
        let mut s = AugmentationSpec::identity();
        s.flip_h_prob = 1.5;
        assert!(augment(&img, &s, 0).is_err());
        let mut s = AugmentationSpec::identity();
        s.crop_frac = (0.0, 1.0);
        assert!(augment(&img, &s, 0).is_err());
        let mut s = AugmentationSpec::identity();
        s.blur_sigma = (2.0, 1.0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn forced_horizontal_flip() {
        let img = sample_image();
        let mut s = AugmentationSpec::identity();
        s.flip_h_prob = 1.0;
        assert_eq!(augment(&img, &s, 7).unwrap(), flip(&img, FlipAxis::Horizontal));
    }
}
