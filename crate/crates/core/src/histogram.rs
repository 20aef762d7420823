use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform binning of `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self { lo: -3.0, hi: 3.0, bins: 120 }
    }
}

impl HistogramSpec {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(lo < hi) || bins == 0 || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidConfig(format!("bad histogram domain [{lo}, {hi}) with {bins} bins")));
        }
        Ok(Self { lo, hi, bins })
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    pub fn center(&self, bin: usize) -> f64 {
        self.lo + (bin as f64 + 0.5) * self.width()
    }

    /// Bin holding `x`, if it lies in the domain.
    pub fn bin_of(&self, x: f64) -> Option<usize> {
        if !(x >= self.lo && x < self.hi) {
            return None;
        }
        let b = ((x - self.lo) / self.width()) as usize;
        Some(b.min(self.bins - 1))
    }
}

/// Counts over a [`HistogramSpec`] plus out-of-domain tallies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub spec: HistogramSpec,
    pub counts: Vec<u64>,
    pub below: u64,
    pub above: u64,
}

impl Histogram {
    pub fn empty(spec: HistogramSpec) -> Self {
        Self { spec, counts: vec![0; spec.bins], below: 0, above: 0 }
    }

    pub fn from_samples(spec: HistogramSpec, samples: impl IntoIterator<Item = f64>) -> Self {
        let mut h = Self::empty(spec);
        for x in samples {
            h.add(x);
        }
        h
    }

    pub fn add(&mut self, x: f64) {
        match self.spec.bin_of(x) {
            Some(b) => self.counts[b] += 1,
            None if x < self.spec.lo => self.below += 1,
            None => self.above += 1,
        }
    }

    pub fn merge(&mut self, other: &Histogram) {
        debug_assert_eq!(self.spec, other.spec);
        for (c, o) in self.counts.iter_mut().zip(&other.counts) {
            *c += o;
        }
        self.below += other.below;
        self.above += other.above;
    }

    pub fn in_domain(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.in_domain() + self.below + self.above
    }

    /// Fraction of all samples falling outside the domain.
    pub fn outside_mass(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            (self.below + self.above) as f64 / t as f64
        }
    }

    /// Per-bin mass normalized over in-domain samples (sums to one).
    pub fn masses(&self) -> Result<Vec<f64>> {
        let n = self.in_domain();
        if n == 0 {
            return Err(Error::Empty("histogram has no in-domain samples".into()));
        }
        Ok(self.counts.iter().map(|&c| c as f64 / n as f64).collect())
    }

    /// Per-bin density (mass divided by bin width).
    pub fn densities(&self) -> Result<Vec<f64>> {
        let w = self.spec.width();
        Ok(self.masses()?.into_iter().map(|m| m / w).collect())
    }

    /// Bin with the largest count (first one on ties).
    pub fn mode_bin(&self) -> Result<usize> {
        if self.in_domain() == 0 {
            return Err(Error::Empty("histogram has no in-domain samples".into()));
        }
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn mode(&self) -> Result<f64> {
        Ok(self.spec.center(self.mode_bin()?))
    }

    pub fn count_at(&self, x: f64) -> u64 {
        self.spec.bin_of(x).map(|b| self.counts[b]).unwrap_or(0)
    }

    /// Total-variation distance between the normalized in-domain masses.
    pub fn tv_distance(&self, other: &Histogram) -> Result<f64> {
        if self.spec != other.spec {
            return Err(Error::InvalidConfig("histograms use different bins".into()));
        }
        let p = self.masses()?;
        let q = other.masses()?;
        Ok(0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binning_and_mass() {
        let spec = HistogramSpec::new(-1.0, 1.0, 4).unwrap();
        let h = Histogram::from_samples(spec, [-0.9, -0.1, 0.1, 0.2, 5.0, -2.0]);
        assert_eq!(h.counts, vec![1, 1, 2, 0]);
        assert_eq!((h.below, h.above), (1, 1));
        let m = h.masses().unwrap();
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(h.mode_bin().unwrap(), 2);
        assert!((h.outside_mass() - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn constant_samples_single_bin() {
        let h = Histogram::from_samples(HistogramSpec::default(), std::iter::repeat_n(0.7, 50));
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
    }

    #[test]
    fn tv_of_identical_is_zero() {
        let spec = HistogramSpec::default();
        let h = Histogram::from_samples(spec, [0.1, 0.2, -1.0]);
        assert_eq!(h.tv_distance(&h).unwrap(), 0.0);
    }
}
