//! Copy-paste mixing of images and supervisory signals.
//!
//! Every mixer keeps the background source where the mask is 1 and takes the
//! pasted (foreground) source where the mask is 0. Images are `[C, spatial...]`
//! tensors whose trailing extents equal the mask shape; the mask is shared
//! across channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::maskgen::{ravel, unravel, Mask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which way a mixed sample was built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Unlabeled crop pasted into a labeled background.
    Inward,
    /// Labeled crop pasted into an unlabeled background.
    Outward,
    /// Both sources from the same pool.
    Within,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedSample<T> {
    pub image: Tensor<T>,
    pub target: LabelMap,
    pub mask: Mask,
    pub direction: Direction,
}

fn check_image<T: Scalar>(x: &Tensor<T>, mask: &Mask) -> Result<usize> {
    let s = x.shape();
    let m = mask.shape();
    if s.len() < m.len() || &s[s.len() - m.len()..] != m {
        return Err(Error::shape("mixer image", s, m));
    }
    Ok(s[..s.len() - m.len()].iter().product())
}

/// `background ⊙ M + foreground ⊙ (1 − M)` for images.
pub fn paste_image<T: Scalar>(background: &Tensor<T>, foreground: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    if background.shape() != foreground.shape() {
        return Err(Error::shape("paste_image", background.shape(), foreground.shape()));
    }
    let planes = check_image(background, mask)?;
    let n = mask.len();
    let mut out = background.clone();
    let fg = foreground.data();
    let dst = out.data_mut();
    for p in 0..planes {
        for (i, &b) in mask.bits().iter().enumerate() {
            if b == 0 {
                dst[p * n + i] = fg[p * n + i];
            }
        }
    }
    Ok(out)
}

/// `background ⊙ M + foreground ⊙ (1 − M)` for label maps; voxelwise
/// selection, never blending.
pub fn paste_labels(background: &LabelMap, foreground: &LabelMap, mask: &Mask) -> Result<LabelMap> {
    if background.shape() != mask.shape() || foreground.shape() != mask.shape() {
        return Err(Error::shape("paste_labels", background.shape(), mask.shape()));
    }
    if background.num_classes() != foreground.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "label maps disagree on class count: {} vs {}",
            background.num_classes(),
            foreground.num_classes()
        )));
    }
    let classes = background
        .classes()
        .iter()
        .zip(foreground.classes())
        .zip(mask.bits())
        .map(|((&b, &f), &m)| if m == 1 { b } else { f })
        .collect();
    LabelMap::new(mask.shape().to_vec(), classes, background.num_classes())
}

/// Bidirectional image mixing:
/// `x_in = xl_j ⊙ M + xu_p ⊙ (1 − M)`, `x_out = xu_q ⊙ M + xl_i ⊙ (1 − M)`.
pub fn bcp_mix_images<T: Scalar>(
    xl_j: &Tensor<T>,
    xu_p: &Tensor<T>,
    xl_i: &Tensor<T>,
    xu_q: &Tensor<T>,
    mask: &Mask,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((paste_image(xl_j, xu_p, mask)?, paste_image(xu_q, xl_i, mask)?))
}

/// Bidirectional label mixing with the same mask as the images:
/// `y_in = yl_j ⊙ M + ỹu_p ⊙ (1 − M)`, `y_out = ỹu_q ⊙ M + yl_i ⊙ (1 − M)`.
pub fn bcp_mix_labels(
    yl_j: &LabelMap,
    yu_p: &LabelMap,
    yl_i: &LabelMap,
    yu_q: &LabelMap,
    mask: &Mask,
) -> Result<(LabelMap, LabelMap)> {
    Ok((paste_labels(yl_j, yu_p, mask)?, paste_labels(yu_q, yl_i, mask)?))
}

/// Copy-paste between two samples of the same pool: `a1 ⊙ M + a2 ⊙ (1 − M)`.
pub fn within_set_mix<T: Scalar>(
    a1: (&Tensor<T>, &LabelMap),
    a2: (&Tensor<T>, &LabelMap),
    mask: &Mask,
) -> Result<MixedSample<T>> {
    Ok(MixedSample {
        image: paste_image(a1.0, a2.0, mask)?,
        target: paste_labels(a1.1, a2.1, mask)?,
        mask: mask.clone(),
        direction: Direction::Within,
    })
}

/// Convex blend `gamma · (x1, y1) + (1 − gamma) · (x2, y2)`; targets are
/// per-class weight maps (one-hot or soft).
pub fn mixup_mix<T: Scalar>(
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    y1: &Tensor<T>,
    y2: &Tensor<T>,
    gamma: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "mixup gamma must lie in [0, 1], got {gamma}"
        )));
    }
    if x1.shape() != x2.shape() {
        return Err(Error::shape("mixup image", x1.shape(), x2.shape()));
    }
    if y1.shape() != y2.shape() {
        return Err(Error::shape("mixup target", y1.shape(), y2.shape()));
    }
    let g = T::of(gamma);
    let h = T::one() - g;
    let blend = |a: &Tensor<T>, b: &Tensor<T>| {
        let data = a.data().iter().zip(b.data()).map(|(&u, &v)| g * u + h * v).collect();
        Tensor::new(a.shape().to_vec(), data)
    };
    Ok((blend(x1, x2)?, blend(y1, y2)?))
}

/// Tile-source assignment for fine-grained CutMix.
///
/// The spatial grid is cut into `grid` tiles along every axis; for each output
/// sample and tile position, `sources[out][tile]` names the batch member whose
/// tile is copied there.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FgCutMixPlan {
    pub shape: Vec<usize>,
    pub grid: usize,
    pub sources: Vec<Vec<usize>>,
}

impl FgCutMixPlan {
    pub fn new(batch: usize, shape: &[usize], grid: usize, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::InvalidArgument("fg-cutmix needs a non-empty batch".into()));
        }
        if grid == 0 || shape.iter().any(|&d| d % grid != 0) {
            return Err(Error::InvalidShape {
                op: "fg_cutmix",
                detail: format!("extents {shape:?} must be divisible by grid {grid}"),
            });
        }
        let tiles = grid.pow(shape.len() as u32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sources = (0..batch)
            .map(|_| (0..tiles).map(|_| rng.gen_range(0..batch)).collect())
            .collect();
        Ok(Self {
            shape: shape.to_vec(),
            grid,
            sources,
        })
    }

    /// Tile index holding the voxel at flat position `flat`.
    pub fn tile_of(&self, flat: usize) -> usize {
        let coord = unravel(flat, &self.shape);
        let tile: Vec<usize> = coord
            .iter()
            .zip(&self.shape)
            .map(|(&c, &d)| c / (d / self.grid))
            .collect();
        let tgrid = vec![self.grid; self.shape.len()];
        ravel(&tile, &tgrid)
    }

    /// Source batch member for every voxel of output `out`.
    pub fn voxel_sources(&self, out: usize) -> Vec<usize> {
        let n: usize = self.shape.iter().product();
        (0..n).map(|i| self.sources[out][self.tile_of(i)]).collect()
    }

    pub fn apply_images<T: Scalar>(&self, images: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let n: usize = self.shape.iter().product();
        let mask = Mask::ones(&self.shape);
        let planes = images
            .iter()
            .map(|x| check_image(x, &mask))
            .collect::<Result<Vec<_>>>()?;
        if images.len() != self.sources.len() || planes.iter().any(|&p| p != planes[0]) {
            return Err(Error::InvalidArgument(
                "fg-cutmix images must match the plan's batch and channel count".into(),
            ));
        }
        (0..images.len())
            .map(|o| {
                let src = self.voxel_sources(o);
                let mut data = Vec::with_capacity(images[o].len());
                for p in 0..planes[0] {
                    data.extend((0..n).map(|i| images[src[i]].data()[p * n + i]));
                }
                Tensor::new(images[o].shape().to_vec(), data)
            })
            .collect()
    }

    pub fn apply_labels(&self, labels: &[LabelMap]) -> Result<Vec<LabelMap>> {
        if labels.len() != self.sources.len() || labels.iter().any(|l| l.shape() != self.shape) {
            return Err(Error::InvalidArgument(
                "fg-cutmix labels must match the plan's batch and shape".into(),
            ));
        }
        (0..labels.len())
            .map(|o| {
                let src = self.voxel_sources(o);
                let classes = src
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| labels[s].classes()[i])
                    .collect();
                LabelMap::new(self.shape.clone(), classes, labels[0].num_classes())
            })
            .collect()
    }
}

/// Re-tile a batch of (image, target) pairs; images and targets move together.
pub fn fg_cutmix_mix<T: Scalar>(
    batch: &[(Tensor<T>, LabelMap)],
    grid: usize,
    seed: u64,
) -> Result<(Vec<(Tensor<T>, LabelMap)>, FgCutMixPlan)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidArgument("fg-cutmix needs a non-empty batch".into()))?;
    let plan = FgCutMixPlan::new(batch.len(), first.1.shape(), grid, seed)?;
    let images: Vec<Tensor<T>> = batch.iter().map(|(x, _)| x.clone()).collect();
    let labels: Vec<LabelMap> = batch.iter().map(|(_, y)| y.clone()).collect();
    let out = plan
        .apply_images(&images)?
        .into_iter()
        .zip(plan.apply_labels(&labels)?)
        .collect();
    Ok((out, plan))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: [[f64; 2]; 2]) -> Tensor<f64> {
        Tensor::new(vec![1, 2, 2], rows.concat()).unwrap()
    }

    #[test]
    fn bcp_images_two_by_two() {
        let xl_j = t2([[1.0, 1.0], [1.0, 1.0]]);
        let xu_p = t2([[9.0, 9.0], [9.0, 9.0]]);
        let mask = Mask::from_bits(vec![2, 2], vec![1, 0, 1, 1]).unwrap();
        let (x_in, x_out) = bcp_mix_images(&xl_j, &xu_p, &xl_j, &xu_p, &mask).unwrap();
        assert_eq!(x_in, t2([[1.0, 9.0], [1.0, 1.0]]));
        assert_eq!(x_out, t2([[9.0, 1.0], [9.0, 9.0]]));
    }

    #[test]
    fn bcp_endpoints() {
        let a = t2([[1.0, 2.0], [3.0, 4.0]]);
        let b = t2([[5.0, 6.0], [7.0, 8.0]]);
        let c = t2([[9.0, 10.0], [11.0, 12.0]]);
        let d = t2([[13.0, 14.0], [15.0, 16.0]]);
        let (i, o) = bcp_mix_images(&a, &b, &c, &d, &Mask::ones(&[2, 2])).unwrap();
        assert_eq!((i, o), (a.clone(), d.clone()));
        let (i, o) = bcp_mix_images(&a, &b, &c, &d, &Mask::zeros(&[2, 2])).unwrap();
        assert_eq!((i, o), (b, c));
    }

    #[test]
    fn bcp_labels_two_by_two() {
        let l = |v: [u8; 4]| LabelMap::new(vec![2, 2], v.to_vec(), 3).unwrap();
        let mask = Mask::from_bits(vec![2, 2], vec![1, 0, 1, 1]).unwrap();
        let (y_in, y_out) = bcp_mix_labels(&l([1; 4]), &l([2; 4]), &l([0; 4]), &l([2; 4]), &mask).unwrap();
        assert_eq!(y_in, l([1, 2, 1, 1]));
        assert_eq!(y_out, l([2, 0, 2, 2]));
        let (y_in, _) = bcp_mix_labels(&l([1; 4]), &l([2; 4]), &l([0; 4]), &l([2; 4]), &Mask::ones(&[2, 2])).unwrap();
        assert_eq!(y_in, l([1; 4]));
    }

    #[test]
    fn labels_with_mismatched_class_count_rejected() {
        let a = LabelMap::filled(&[2, 2], 1, 3).unwrap();
        let b = LabelMap::filled(&[2, 2], 1, 2).unwrap();
        assert!(paste_labels(&a, &b, &Mask::ones(&[2, 2])).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::<f64>::zeros(&[1, 2, 2]);
        let b = Tensor::<f64>::zeros(&[1, 3, 2]);
        assert!(bcp_mix_images(&a, &b, &a, &a, &Mask::ones(&[2, 2])).is_err());
        assert!(paste_image(&a, &a, &Mask::ones(&[3, 2])).is_err());
    }

    #[test]
    fn within_set_identities() {
        let x = t2([[1.0, 2.0], [3.0, 4.0]]);
        let y = LabelMap::new(vec![2, 2], vec![0, 1, 1, 0], 2).unwrap();
        let mask = Mask::from_bits(vec![2, 2], vec![0, 1, 0, 1]).unwrap();
        let s = within_set_mix((&x, &y), (&x, &y), &mask).unwrap();
        assert_eq!((s.image, s.target), (x.clone(), y.clone()));
        let z = t2([[7.0; 2]; 2]);
        let yz = LabelMap::filled(&[2, 2], 1, 2).unwrap();
        let s = within_set_mix((&x, &y), (&z, &yz), &Mask::ones(&[2, 2])).unwrap();
        assert_eq!(s.image, x);
        assert_eq!(s.direction, Direction::Within);
    }

    #[test]
    fn mixup_blends() {
        let two = Tensor::<f64>::full(&[1, 2, 2], 2.0);
        let four = Tensor::<f64>::full(&[1, 2, 2], 4.0);
        let y1 = LabelMap::filled(&[2, 2], 1, 2).unwrap().one_hot::<f64>();
        let y2 = LabelMap::filled(&[2, 2], 0, 2).unwrap().one_hot::<f64>();
        let (x, y) = mixup_mix(&two, &four, &y1, &y2, 0.5).unwrap();
        assert!(x.data().iter().all(|&v| v == 3.0));
        assert!(y.data().iter().all(|&v| v == 0.5));
        assert_eq!(mixup_mix(&two, &four, &y1, &y2, 1.0).unwrap(), (two.clone(), y1.clone()));
        assert_eq!(mixup_mix(&two, &four, &y1, &y2, 0.0).unwrap(), (four.clone(), y2.clone()));
        assert!(mixup_mix(&two, &four, &y1, &y2, 1.5).is_err());
    }

    #[test]
    fn cutmix_batch_of_one_is_identity() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let y = LabelMap::new(vec![4, 4], (0..16).map(|i| (i % 3) as u8).collect(), 3).unwrap();
        let (out, _) = fg_cutmix_mix(&[(x.clone(), y.clone())], 2, 5).unwrap();
        assert_eq!(out, vec![(x, y)]);
    }

    #[test]
    fn cutmix_two_images_against_hand_assembly() {
        let a = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let b = Tensor::from_fn(&[1, 4, 4], |i| 100.0 + i as f64);
        let ya = LabelMap::filled(&[4, 4], 1, 2).unwrap();
        let yb = LabelMap::filled(&[4, 4], 0, 2).unwrap();
        let (out, plan) = fg_cutmix_mix(&[(a.clone(), ya), (b.clone(), yb)], 2, 11).unwrap();
        for (o, (img, lab)) in out.iter().enumerate() {
            for r in 0..4 {
                for c in 0..4 {
                    let tile = (r / 2) * 2 + c / 2;
                    let src = plan.sources[o][tile];
                    let want = if src == 0 { a.data()[r * 4 + c] } else { b.data()[r * 4 + c] };
                    assert_eq!(img.data()[r * 4 + c], want);
                    assert_eq!(lab.classes()[r * 4 + c], if src == 0 { 1 } else { 0 });
                }
            }
        }
        assert!(FgCutMixPlan::new(2, &[6, 4], 4, 0).is_err());
    }
}
