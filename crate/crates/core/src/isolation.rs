//! Mask representations and instance isolation.
//!
//! A multi-instance annotation ([`InstanceMask`]) is split into one binary
//! problem per instance ([`isolate`]), optionally viewed as a stacked volume
//! ([`project_stack`]), and per-instance probability maps are recombined with
//! [`merge`].

use crate::error::{Error, Result};

/// Per-pixel instance labels, `0` is background.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InstanceMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

/// Per-pixel `{0, 1}` values.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

/// Per-pixel probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

/// `N` binary layers over the same grid, layer-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryVolume {
    height: usize,
    width: usize,
    layers: usize,
    bits: Vec<u8>,
}

fn check_len(what: &'static str, height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 || height * width != len {
        return Err(Error::shape(
            what,
            format!("{height}x{width} grid needs {} values, got {len}", height * width),
        ));
    }
    Ok(())
}

impl InstanceMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        check_len("instance mask", height, width, labels.len())?;
        Ok(Self { height, width, labels })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    /// Largest label present.
    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Distinct non-zero labels in increasing order.
    pub fn present_labels(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..=255u8).filter(|&l| seen[l as usize]).collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// Binary mask of instance `label` (may be empty).
    pub fn instance(&self, label: u8) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self
                .labels
                .iter()
                .map(|&l| u8::from(l == label && label != 0))
                .collect(),
        }
    }

    /// Remaps labels to a contiguous `0..=N` range preserving their order.
    ///
    /// Returns the normalized mask and the table mapping each new label `k`
    /// (index `k - 1`) to its original value.
    pub fn normalize(&self) -> (InstanceMask, Vec<u8>) {
        let table = self.present_labels();
        let mut lookup = [0u8; 256];
        for (k, &orig) in table.iter().enumerate() {
            lookup[orig as usize] = (k + 1) as u8;
        }
        let labels = self.labels.iter().map(|&l| lookup[l as usize]).collect();
        (
            InstanceMask {
                height: self.height,
                width: self.width,
                labels,
            },
            table,
        )
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        check_len("binary mask", height, width, bits.len())?;
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(Error::invalid(format!(
                "binary mask value {} at pixel {pos} is not 0 or 1",
                bits[pos]
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    /// Builds a mask from a predicate over `(y, x)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(u8::from(f(y, x)));
            }
        }
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(b)).collect()
    }

    pub fn to_probabilities(&self) -> ProbabilityMap {
        ProbabilityMap {
            height: self.height,
            width: self.width,
            values: self.to_f64(),
        }
    }
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_len("probability map", height, width, values.len())?;
        if let Some(pos) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!(
                "probability {} at pixel {pos} is outside [0, 1]",
                values[pos]
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn threshold(&self, t: f64) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.values.iter().map(|&p| u8::from(p >= t)).collect(),
        }
    }
}

impl BinaryVolume {
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn layer(&self, k: usize) -> BinaryMask {
        let plane = self.height * self.width;
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits[k * plane..(k + 1) * plane].to_vec(),
        }
    }

    pub fn get(&self, k: usize, y: usize, x: usize) -> bool {
        self.bits[(k * self.height + y) * self.width + x] != 0
    }
}

/// Splits an instance mask into one binary mask per label `1..=N`, where `N`
/// is the largest label present. Labels that do not occur yield empty masks.
pub fn isolate(mask: &InstanceMask) -> Result<Vec<BinaryMask>> {
    let n = mask.max_label();
    if n == 0 {
        return Err(Error::invalid("instance mask has no foreground labels"));
    }
    Ok((1..=n).map(|k| mask.instance(k)).collect())
}

/// Stacks [`isolate`]'s output into an `H x W x N` volume.
pub fn project_stack(mask: &InstanceMask) -> Result<BinaryVolume> {
    let layers = isolate(mask)?;
    let n = layers.len();
    let bits = layers.into_iter().flat_map(|m| m.bits).collect();
    Ok(BinaryVolume {
        height: mask.height,
        width: mask.width,
        layers: n,
        bits,
    })
}

/// Recombines per-instance probabilities: each pixel takes the instance with
/// the highest probability if it reaches `threshold`, else background. Ties
/// go to the lowest instance label.
pub fn merge(preds: &[ProbabilityMap], threshold: f64) -> Result<InstanceMask> {
    let first = preds
        .first()
        .ok_or_else(|| Error::invalid("merge needs at least one probability map"))?;
    if preds.len() > 255 {
        return Err(Error::invalid(format!(
            "{} instances exceed the 255 label cap",
            preds.len()
        )));
    }
    for (k, p) in preds.iter().enumerate() {
        if p.dims() != first.dims() {
            return Err(Error::shape(
                "merge",
                format!("map {k} is {:?}, map 0 is {:?}", p.dims(), first.dims()),
            ));
        }
    }
    let labels = (0..first.values.len())
        .map(|i| {
            let mut best = 0usize;
            for k in 1..preds.len() {
                if preds[k].values[i] > preds[best].values[i] {
                    best = k;
                }
            }
            if preds[best].values[i] >= threshold {
                (best + 1) as u8
            } else {
                0
            }
        })
        .collect();
    Ok(InstanceMask {
        height: first.height,
        width: first.width,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> InstanceMask {
        InstanceMask::new(2, 2, vec![0, 1, 2, 2]).unwrap()
    }

    #[test]
    fn isolate_splits_by_label() {
        let parts = isolate(&sample()).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].bits(), &[0, 1, 0, 0]);
        assert_eq!(parts[1].bits(), &[0, 0, 1, 1]);
    }

    #[test]
    fn isolate_single_instance_is_binarized_input() {
        let m = InstanceMask::new(2, 3, vec![0, 1, 1, 0, 0, 1]).unwrap();
        let parts = isolate(&m).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].bits(), m.labels());
    }

    #[test]
    fn isolate_rejects_background_only() {
        assert!(isolate(&InstanceMask::background(3, 3)).is_err());
        assert!(project_stack(&InstanceMask::background(3, 3)).is_err());
    }

    #[test]
    fn project_stack_matches_isolate() {
        let v = project_stack(&sample()).unwrap();
        assert_eq!(v.layers(), 2);
        let parts = isolate(&sample()).unwrap();
        for (k, p) in parts.iter().enumerate() {
            assert_eq!(&v.layer(k), p);
        }
        for y in 0..2 {
            for x in 0..2 {
                assert!((0..2).filter(|&k| v.get(k, y, x)).count() <= 1);
            }
        }
        let single = InstanceMask::new(1, 2, vec![1, 0]).unwrap();
        assert_eq!(project_stack(&single).unwrap().layers(), 1);
    }

    #[test]
    fn merge_takes_argmax_above_threshold() {
        let a = ProbabilityMap::new(1, 3, vec![0.7, 0.4, 0.5]).unwrap();
        let b = ProbabilityMap::new(1, 3, vec![0.6, 0.3, 0.5]).unwrap();
        let m = merge(&[a, b], 0.5).unwrap();
        assert_eq!(m.labels(), &[1, 0, 1]);
    }

    #[test]
    fn merge_rejects_mismatched_dims() {
        let a = ProbabilityMap::new(1, 3, vec![0.0; 3]).unwrap();
        let b = ProbabilityMap::new(3, 1, vec![0.0; 3]).unwrap();
        assert!(merge(&[a, b], 0.5).is_err());
        assert!(merge(&[], 0.5).is_err());
    }

    #[test]
    fn normalize_compacts_labels() {
        let m = InstanceMask::new(1, 5, vec![0, 7, 3, 3, 0]).unwrap();
        let (n, table) = m.normalize();
        assert_eq!(n.labels(), &[0, 2, 1, 1, 0]);
        assert_eq!(table, vec![3, 7]);
    }

    #[test]
    fn binary_mask_rejects_non_binary() {
        assert!(BinaryMask::new(1, 2, vec![0, 2]).is_err());
        assert!(ProbabilityMap::new(1, 1, vec![1.5]).is_err());
    }
}
