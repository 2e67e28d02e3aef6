//! Background preservation by blending the reference latent into a new run.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::grid::resample_nearest;
use crate::latent::LatentImage;
use crate::segmentation::{SegmentLabel, SegmentationMap};

/// Pixels to take from the reference: those whose label is kept in both
/// segmentations, upsampled to `latent_side`. Background is always kept.
pub fn compute_retention_mask(
    seg_ref: &SegmentationMap,
    seg_new: &SegmentationMap,
    keep_labels: &BTreeSet<SegmentLabel>,
    latent_side: usize,
) -> Result<Vec<bool>> {
    if seg_ref.side() != seg_new.side() {
        return Err(Error::ResolutionMismatch {
            expected: seg_ref.side(),
            found: seg_new.side(),
        });
    }
    let kept = |l: &SegmentLabel| *l == SegmentLabel::Background || keep_labels.contains(l);
    let retain: Vec<bool> = seg_ref
        .pixel_labels()?
        .iter()
        .zip(seg_new.pixel_labels()?.iter())
        .map(|(a, b)| kept(a) && kept(b))
        .collect();
    Ok(resample_nearest(&retain, seg_ref.side(), latent_side))
}

/// Takes `z_ref` where `retain` is set and `z_new` elsewhere, in every channel.
pub fn blend_latents(
    z_ref: &LatentImage,
    z_new: &LatentImage,
    retain: &[bool],
) -> Result<LatentImage> {
    if !z_ref.same_shape(z_new) {
        return Err(Error::ShapeMismatch(format!(
            "cannot blend a {}x{}x{} latent with a {}x{}x{} one",
            z_ref.channels(),
            z_ref.height(),
            z_ref.width(),
            z_new.channels(),
            z_new.height(),
            z_new.width()
        )));
    }
    if retain.len() != z_ref.pixels() {
        return Err(Error::ShapeMismatch(format!(
            "retention mask has {} pixels, latent has {}",
            retain.len(),
            z_ref.pixels()
        )));
    }
    let mut out = z_new.clone();
    for c in 0..out.channels() {
        let src = z_ref.channel(c);
        for ((v, &r), &keep) in out.channel_mut(c).iter_mut().zip(src).zip(retain) {
            if keep {
                *v = r;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labeled(labels: Vec<SegmentLabel>) -> SegmentationMap {
        let k = labels.len();
        SegmentationMap::new(2, k, (0..4).map(|p| p % k).collect())
            .unwrap()
            .with_labels(labels, vec![1, 2])
            .unwrap()
    }

    #[test]
    fn background_in_both_is_retained_and_object_is_not() {
        let bg = SegmentLabel::Background;
        let basket = SegmentLabel::Noun(1);
        let r = labeled(vec![bg, bg, bg, bg]);
        let n = labeled(vec![bg, basket, bg, basket]);
        let keep = BTreeSet::from([bg]);
        assert_eq!(
            compute_retention_mask(&r, &n, &keep, 2).unwrap(),
            vec![true, false, true, false]
        );
        let all = BTreeSet::from([bg, basket]);
        assert_eq!(
            compute_retention_mask(&r, &n, &all, 4).unwrap(),
            vec![true; 16]
        );
    }

    #[test]
    fn checkerboard_blend() {
        let a = LatentImage::new(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let b = LatentImage::new(
            2,
            2,
            2,
            vec![-1.0, -2.0, -3.0, -4.0, -5.0, -6.0, -7.0, -8.0],
        )
        .unwrap();
        let out = blend_latents(&a, &b, &[true, false, false, true]).unwrap();
        assert_eq!(out.values(), &[1.0, -2.0, -3.0, 4.0, 5.0, -6.0, -7.0, 8.0]);
        assert_eq!(blend_latents(&a, &b, &[true; 4]).unwrap(), a);
        assert_eq!(blend_latents(&a, &b, &[false; 4]).unwrap(), b);
        assert!(blend_latents(&a, &LatentImage::zeros(1, 2), &[true; 4]).is_err());
        assert!(blend_latents(&a, &b, &[true; 3]).is_err());
    }

    proptest! {
        #[test]
        fn blending_a_latent_with_itself_is_identity(
            v in prop::collection::vec(-5.0f32..5.0, 12),
            m in prop::collection::vec(any::<bool>(), 4),
        ) {
            let z = LatentImage::new(3, 2, 2, v).unwrap();
            prop_assert_eq!(blend_latents(&z, &z, &m).unwrap(), z);
        }

        #[test]
        fn shrinking_the_keep_set_never_adds_pixels(
            ref_grid in prop::collection::vec(0usize..3, 4),
            new_grid in prop::collection::vec(0usize..3, 4),
            keep_1 in any::<bool>(),
            keep_2 in any::<bool>(),
        ) {
            let labels = vec![SegmentLabel::Background, SegmentLabel::Noun(1), SegmentLabel::Noun(2)];
            let make = |g: Vec<usize>| SegmentationMap::new(2, 3, g).unwrap().with_labels(labels.clone(), vec![1, 2]).unwrap();
            let (r, n) = (make(ref_grid), make(new_grid));
            let big = BTreeSet::from([SegmentLabel::Background, SegmentLabel::Noun(1), SegmentLabel::Noun(2)]);
            let mut small = BTreeSet::from([SegmentLabel::Background]);
            if keep_1 { small.insert(SegmentLabel::Noun(1)); }
            if keep_2 { small.insert(SegmentLabel::Noun(2)); }
            let a = compute_retention_mask(&r, &n, &small, 2).unwrap();
            let b = compute_retention_mask(&r, &n, &big, 2).unwrap();
            prop_assert!(a.iter().zip(&b).all(|(s, l)| !s || *l));
        }
    }
}
