//! Images, masks, logit maps and the overlap metrics shared by every stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest supported image side, in pixels.
pub const MIN_SIDE: usize = 16;

/// Logits are clamped to this magnitude before any log-sigmoid evaluation.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Height and width of a 2-D grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn contains(&self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width
    }
}

fn check_same(a: Shape, b: Shape, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!(
            "{what}: shape mismatch {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: Shape,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(shape: Shape, pixels: Vec<f64>) -> Result<Self> {
        if shape.height < MIN_SIDE || shape.width < MIN_SIDE {
            return Err(Error::Contract(format!(
                "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {}x{}",
                shape.height, shape.width
            )));
        }
        if pixels.len() != shape.len() {
            return Err(Error::Contract(format!(
                "image buffer has {} values for {}x{}",
                pixels.len(),
                shape.height,
                shape.width
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Contract(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Self { shape, pixels })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[self.shape.index(row, col)]
    }
}

/// Binary mask. May be empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    shape: Shape,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(shape: Shape) -> Self {
        Self {
            shape,
            bits: vec![false; shape.len()],
        }
    }

    pub fn full(shape: Shape) -> Self {
        Self {
            shape,
            bits: vec![true; shape.len()],
        }
    }

    pub fn from_bits(shape: Shape, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != shape.len() {
            return Err(Error::Contract(format!(
                "mask buffer has {} bits for {}x{}",
                bits.len(),
                shape.height,
                shape.width
            )));
        }
        Ok(Self { shape, bits })
    }

    /// Builds a mask from a list of set `(row, col)` coordinates.
    pub fn from_points(shape: Shape, points: &[(usize, usize)]) -> Result<Self> {
        let mut mask = Self::empty(shape);
        for &(r, c) in points {
            if r >= shape.height || c >= shape.width {
                return Err(Error::Contract(format!("point ({r},{c}) outside mask")));
            }
            mask.set(r, c, true);
        }
        Ok(mask)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[self.shape.index(row, col)]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        let i = self.shape.index(row, col);
        self.bits[i] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// In-place union; shapes must match.
    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        check_same(self.shape, other.shape, "union")?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        check_same(self.shape, other.shape, "intersection")?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count())
    }

    /// Set pixels as `(row, col)` pairs in raster order.
    pub fn coords(&self) -> Vec<(usize, usize)> {
        (0..self.shape.height)
            .flat_map(|r| (0..self.shape.width).map(move |c| (r, c)))
            .filter(|&(r, c)| self.get(r, c))
            .collect()
    }

    /// Binary erosion with a square structuring element of the given radius.
    /// Pixels closer than `radius` to the image border are treated as background.
    pub fn erode(&self, radius: usize) -> BinaryMask {
        let s = self.shape;
        let r = radius as i64;
        let mut out = BinaryMask::empty(s);
        for row in 0..s.height as i64 {
            for col in 0..s.width as i64 {
                let mut keep = true;
                'scan: for dr in -r..=r {
                    for dc in -r..=r {
                        let (rr, cc) = (row + dr, col + dc);
                        if !s.contains(rr, cc) || !self.get(rr as usize, cc as usize) {
                            keep = false;
                            break 'scan;
                        }
                    }
                }
                if keep {
                    out.set(row as usize, col as usize, true);
                }
            }
        }
        out
    }

    /// Binary dilation with a square structuring element of the given radius.
    pub fn dilate(&self, radius: usize) -> BinaryMask {
        let s = self.shape;
        let r = radius as i64;
        let mut out = BinaryMask::empty(s);
        for (row, col) in self.coords() {
            for dr in -r..=r {
                for dc in -r..=r {
                    let (rr, cc) = (row as i64 + dr, col as i64 + dc);
                    if s.contains(rr, cc) {
                        out.set(rr as usize, cc as usize, true);
                    }
                }
            }
        }
        out
    }
}

/// A ground-truth instance: nonempty mask plus its class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    pub id: u16,
    pub class_id: u8,
    mask: BinaryMask,
}

impl InstanceMask {
    pub fn new(id: u16, class_id: u8, mask: BinaryMask) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::Contract(format!("instance {id} has no pixels")));
        }
        Ok(Self { id, class_id, mask })
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }
}

/// Real-valued per-pixel logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    shape: Shape,
    values: Vec<f64>,
}

impl LogitMap {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::Contract(format!(
                "logit buffer has {} values for {}x{}",
                values.len(),
                shape.height,
                shape.width
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logit map".into()));
        }
        Ok(Self { shape, values })
    }

    pub fn constant(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            values: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]`.
    pub fn clamped(&self, i: usize) -> f64 {
        self.values[i].clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    }
}

/// Intersection over union. Zero when both masks are empty.
pub fn compute_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let union = a.count() + b.count() - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Dice coefficient. One when both masks are empty.
pub fn compute_dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Sets a bit where the logit is strictly above `threshold`.
pub fn binarize(logits: &LogitMap, threshold: f64) -> BinaryMask {
    BinaryMask {
        shape: logits.shape,
        bits: logits.values.iter().map(|v| *v > threshold).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_by_two(points: &[(usize, usize)]) -> BinaryMask {
        BinaryMask::from_points(Shape::new(2, 2), points).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = two_by_two(&[(0, 0), (0, 1)]);
        let b = two_by_two(&[(0, 1), (1, 1)]);
        assert_eq!(compute_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(compute_iou(&a, &two_by_two(&[(1, 0), (1, 1)])).unwrap(), 0.0);
        assert!((compute_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(compute_iou(&two_by_two(&[]), &two_by_two(&[])).unwrap(), 0.0);
    }

    #[test]
    fn dice_examples() {
        let a = two_by_two(&[(0, 0), (0, 1)]);
        let b = two_by_two(&[(0, 1), (1, 1)]);
        assert_eq!(compute_dice(&a, &a).unwrap(), 1.0);
        assert_eq!(compute_dice(&a, &b).unwrap(), 0.5);
        assert_eq!(compute_dice(&two_by_two(&[]), &b).unwrap(), 0.0);
        assert_eq!(compute_dice(&two_by_two(&[]), &two_by_two(&[])).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let a = BinaryMask::empty(Shape::new(2, 2));
        let b = BinaryMask::empty(Shape::new(2, 3));
        assert!(matches!(compute_iou(&a, &b), Err(Error::Contract(_))));
        assert!(matches!(compute_dice(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn binarize_examples() {
        let s = Shape::new(2, 2);
        assert_eq!(binarize(&LogitMap::constant(s, 5.0), 0.0), BinaryMask::full(s));
        assert_eq!(binarize(&LogitMap::constant(s, -5.0), 0.0), BinaryMask::empty(s));
        let l = LogitMap::new(s, vec![1.0, -1.0, 0.0, 0.5]).unwrap();
        assert_eq!(binarize(&l, 0.0).bits(), &[true, false, false, true]);
    }

    #[test]
    fn image_validation() {
        let s = Shape::new(16, 16);
        assert!(Image::new(s, vec![0.5; 256]).is_ok());
        assert!(Image::new(s, vec![1.5; 256]).is_err());
        assert!(Image::new(Shape::new(8, 16), vec![0.5; 128]).is_err());
    }

    #[test]
    fn erosion_and_dilation() {
        let s = Shape::new(9, 9);
        let mut m = BinaryMask::empty(s);
        for r in 2..7 {
            for c in 2..7 {
                m.set(r, c, true);
            }
        }
        assert_eq!(m.erode(1).count(), 9);
        assert_eq!(m.erode(2).count(), 1);
        assert_eq!(m.dilate(1).count(), 49);
    }

    fn arb_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(any::<bool>(), h * w),
                proptest::collection::vec(any::<bool>(), h * w),
            )
                .prop_map(move |(a, b)| {
                    let s = Shape::new(h, w);
                    (
                        BinaryMask::from_bits(s, a).unwrap(),
                        BinaryMask::from_bits(s, b).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn metrics_symmetric_and_ordered((a, b) in arb_pair()) {
            let iou = compute_iou(&a, &b).unwrap();
            let dice = compute_dice(&a, &b).unwrap();
            prop_assert_eq!(iou, compute_iou(&b, &a).unwrap());
            prop_assert_eq!(dice, compute_dice(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&iou));
            prop_assert!((0.0..=1.0).contains(&dice));
            if !(a.is_empty() && b.is_empty()) {
                prop_assert!(dice >= iou);
            }
            if !a.is_empty() {
                prop_assert_eq!(compute_iou(&a, &a).unwrap(), 1.0);
            }
            prop_assert_eq!(compute_dice(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn binarize_idempotent((a, _b) in arb_pair(), c in 0.01f64..20.0) {
            let logits = LogitMap::new(
                a.shape(),
                a.bits().iter().map(|b| if *b { c } else { -c }).collect(),
            ).unwrap();
            prop_assert_eq!(binarize(&logits, 0.0), a);
        }
    }
}
