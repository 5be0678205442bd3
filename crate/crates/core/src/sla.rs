//! Self-logits augmentation: average the lens logits of the `w` layers just
//! below the final one and blend them with the final-layer logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlaConfig {
    pub gamma: f32,
    pub window: usize,
}

impl SlaConfig {
    pub fn new(gamma: f32, window: usize) -> Result<Self> {
        let c = Self { gamma, window };
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        if window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        Ok(c)
    }

    /// Checks the window against a model depth; wider windows are rejected.
    pub fn validate_for(&self, n_layers: usize) -> Result<()> {
        Self::new(self.gamma, self.window)?;
        if self.window > n_layers - 1 {
            return Err(Error::Config(format!(
                "window {} exceeds n_layers - 1 = {}",
                self.window,
                n_layers - 1
            )));
        }
        Ok(())
    }

    /// Layers `L - w ..= L - 1` feeding the augmentation logits.
    pub fn layers(&self, n_layers: usize) -> std::ops::RangeInclusive<usize> {
        (n_layers - self.window)..=(n_layers - 1)
    }
}

/// Elementwise mean of the lens logits, ordered by layer.
pub fn augmentation_logits(lens: &[Vec<f32>], window: usize) -> Result<Vec<f32>> {
    if lens.len() != window || window == 0 {
        return Err(Error::Argument(format!(
            "expected {window} lens vectors, got {}",
            lens.len()
        )));
    }
    let v = lens[0].len();
    if lens.iter().any(|l| l.len() != v) {
        return Err(Error::Argument("lens vectors differ in length".into()));
    }
    if window == 1 {
        return Ok(lens[0].clone());
    }
    let inv = 1.0 / window as f32;
    Ok((0..v)
        .map(|i| lens.iter().map(|l| l[i]).sum::<f32>() * inv)
        .collect())
}

/// `(1 - gamma) * final + gamma * aug`.
pub fn ensemble_logits(final_logits: &[f32], aug: &[f32], gamma: f32) -> Result<Vec<f32>> {
    if final_logits.len() != aug.len() {
        return Err(Error::Argument(format!(
            "final has {} logits, augmentation {}",
            final_logits.len(),
            aug.len()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Argument(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    if gamma == 0.0 {
        return Ok(final_logits.to_vec());
    }
    if gamma == 1.0 {
        return Ok(aug.to_vec());
    }
    Ok(final_logits
        .iter()
        .zip(aug)
        .map(|(f, a)| (1.0 - gamma) * f + gamma * a)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_examples() {
        let one = vec![vec![1.0, -2.0]];
        assert_eq!(augmentation_logits(&one, 1).unwrap(), one[0]);
        let two = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(augmentation_logits(&two, 2).unwrap(), vec![2.0, 3.0]);
        let same = vec![vec![0.5, 7.0]; 3];
        assert_eq!(augmentation_logits(&same, 3).unwrap(), vec![0.5, 7.0]);
        assert!(augmentation_logits(&two, 3).is_err());
    }

    #[test]
    fn ensemble_examples() {
        let f = [1.0, 3.0];
        let a = [2.0, 0.0];
        assert_eq!(ensemble_logits(&f, &a, 0.0).unwrap(), f.to_vec());
        assert_eq!(ensemble_logits(&f, &a, 1.0).unwrap(), a.to_vec());
        let o = ensemble_logits(&f, &a, 0.3).unwrap();
        assert!((o[0] - 1.3).abs() < 1e-6 && (o[1] - 2.1).abs() < 1e-6);
        assert!(ensemble_logits(&f, &a, 1.5).is_err());
        assert!(ensemble_logits(&f, &[1.0], 0.5).is_err());
    }

    #[test]
    fn window_bounds() {
        assert!(SlaConfig::new(0.3, 5).unwrap().validate_for(8).is_ok());
        assert!(SlaConfig::new(0.3, 8).unwrap().validate_for(8).is_err());
        assert!(SlaConfig::new(0.3, 0).is_err());
        assert_eq!(SlaConfig::new(0.3, 5).unwrap().layers(8), 3..=7);
    }

    proptest! {
        #[test]
        fn ensemble_is_convex_and_shift_equivariant(
            pairs in prop::collection::vec((-50.0f32..50.0, -50.0f32..50.0), 1..20),
            gamma in 0.0f32..=1.0,
            shift in -10.0f32..10.0,
        ) {
            let f: Vec<f32> = pairs.iter().map(|p| p.0).collect();
            let a: Vec<f32> = pairs.iter().map(|p| p.1).collect();
            let o = ensemble_logits(&f, &a, gamma).unwrap();
            for i in 0..f.len() {
                let (lo, hi) = (f[i].min(a[i]), f[i].max(a[i]));
                prop_assert!(o[i] >= lo - 1e-4 && o[i] <= hi + 1e-4);
            }
            let fs: Vec<f32> = f.iter().map(|v| v + shift).collect();
            let as_: Vec<f32> = a.iter().map(|v| v + shift).collect();
            let os = ensemble_logits(&fs, &as_, gamma).unwrap();
            for i in 0..f.len() {
                prop_assert!((os[i] - (o[i] + shift)).abs() <= 1e-6 * (1.0 + o[i].abs() + shift.abs()) * 10.0);
            }
        }
    }
}
