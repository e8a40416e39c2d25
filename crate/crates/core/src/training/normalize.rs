use serde::{Deserialize, Serialize};

/// Lower bound on the standard deviation used for scaling.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    None,
    /// Standardize each window by its context mean and standard deviation.
    #[default]
    PerWindow,
}

/// Shift and scale applied to a window; `std` is already floored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub mean: f64,
    pub std: f64,
}

impl ScaleRecord {
    pub const IDENTITY: ScaleRecord = ScaleRecord { mean: 0.0, std: 1.0 };

    /// Mean and floored population standard deviation of `context`.
    pub fn fit(context: &[f64]) -> Self {
        if context.is_empty() {
            return Self::IDENTITY;
        }
        let n = context.len() as f64;
        let mean = context.iter().sum::<f64>() / n;
        let var = context.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }

    pub fn apply_all(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.apply(v)).collect()
    }

    pub fn invert_all(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.invert(v)).collect()
    }
}

impl Normalization {
    pub fn record(self, context: &[f64]) -> ScaleRecord {
        match self {
            Normalization::None => ScaleRecord::IDENTITY,
            Normalization::PerWindow => ScaleRecord::fit(context),
        }
    }
}

/// Standardizes a context; the returned record inverts the transform.
pub fn normalize_window(context: &[f64], mode: Normalization) -> (Vec<f64>, ScaleRecord) {
    let record = mode.record(context);
    (record.apply_all(context), record)
}

pub fn denormalize(values: &[f64], record: &ScaleRecord) -> Vec<f64> {
    record.invert_all(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_context() {
        let (z, r) = normalize_window(&[5.0, 5.0, 5.0], Normalization::PerWindow);
        assert_eq!(z, vec![0.0; 3]);
        assert_eq!(r, ScaleRecord { mean: 5.0, std: STD_FLOOR });
    }

    #[test]
    fn population_std() {
        let (z, r) = normalize_window(&[0.0, 2.0], Normalization::PerWindow);
        assert_eq!((r.mean, r.std), (1.0, 1.0));
        assert_eq!(z, vec![-1.0, 1.0]);
    }

    #[test]
    fn round_trip() {
        let y = [3.5, -1.25, 1e4, 7.0, 0.001];
        let (z, r) = normalize_window(&y, Normalization::PerWindow);
        for (a, b) in denormalize(&z, &r).iter().zip(&y) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn none_is_identity() {
        let y = [3.0, 4.0];
        let (z, r) = normalize_window(&y, Normalization::None);
        assert_eq!(z, y);
        assert_eq!(r, ScaleRecord::IDENTITY);
    }
}
