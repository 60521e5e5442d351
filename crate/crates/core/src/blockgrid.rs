//! Partitioning of activation maps into non-overlapping square spatial blocks.
//!
//! Every channel is split on the same grid. A block is represented by its
//! maximum element, and a block whose maximum does not exceed its channel's
//! threshold is forced to zero.

use crate::error::{Error, Result};
use crate::map::ActivationMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockGridLayout {
    pub block_size: usize,
    pub effective_block_size: usize,
    pub height: usize,
    pub width: usize,
    pub blocks_h: usize,
    pub blocks_w: usize,
}

impl BlockGridLayout {
    pub fn blocks_per_channel(&self) -> usize {
        self.blocks_h * self.blocks_w
    }

    pub fn block_area(&self) -> usize {
        self.effective_block_size * self.effective_block_size
    }

    fn check_map(&self, map: &ActivationMap) -> Result<()> {
        if map.height() != self.height || map.width() != self.width {
            return Err(Error::ShapeMismatch {
                expected: format!("HxW = {}x{}", self.height, self.width),
                actual: format!("{}x{}", map.height(), map.width()),
            });
        }
        Ok(())
    }
}

/// Builds the block grid for an `height x width` map. The block edge shrinks
/// to `min(block_size, height, width)` so small deep-layer maps still get a
/// valid grid.
pub fn make_layout(height: usize, width: usize, block_size: usize) -> Result<BlockGridLayout> {
    if height == 0 || width == 0 || block_size == 0 {
        return Err(Error::InvalidDimension(format!(
            "height, width and block_size must be >= 1 (got {height}, {width}, {block_size})"
        )));
    }
    let eff = block_size.min(height).min(width);
    if height % eff != 0 || width % eff != 0 {
        return Err(Error::NotDivisible { height, width, block: eff });
    }
    Ok(BlockGridLayout {
        block_size,
        effective_block_size: eff,
        height,
        width,
        blocks_h: height / eff,
        blocks_w: width / eff,
    })
}

/// Per-block maxima, `[C, blocks_h, blocks_w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStats {
    pub channels: usize,
    pub blocks_h: usize,
    pub blocks_w: usize,
    pub max_values: Vec<f32>,
}

impl BlockStats {
    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f32 {
        self.max_values[(c * self.blocks_h + i) * self.blocks_w + j]
    }
}

/// Keep/zero decision per block, `[C, blocks_h, blocks_w]`, `true` = retained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    pub channels: usize,
    pub blocks_h: usize,
    pub blocks_w: usize,
    pub keep: Vec<bool>,
}

impl BlockMask {
    pub fn new(channels: usize, blocks_h: usize, blocks_w: usize, keep: Vec<bool>) -> Result<Self> {
        let expected = channels * blocks_h * blocks_w;
        if keep.len() != expected {
            return Err(Error::LengthMismatch { expected, actual: keep.len() });
        }
        Ok(Self { channels, blocks_h, blocks_w, keep })
    }

    pub fn all(channels: usize, blocks_h: usize, blocks_w: usize, keep: bool) -> Self {
        Self { channels, blocks_h, blocks_w, keep: vec![keep; channels * blocks_h * blocks_w] }
    }

    pub fn for_layout(channels: usize, layout: &BlockGridLayout, keep: bool) -> Self {
        Self::all(channels, layout.blocks_h, layout.blocks_w, keep)
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> bool {
        self.keep[(c * self.blocks_h + i) * self.blocks_w + j]
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    pub fn zeroed_count(&self) -> usize {
        self.len() - self.kept_count()
    }

    fn check(&self, channels: usize, layout: &BlockGridLayout) -> Result<()> {
        if self.channels != channels || self.blocks_h != layout.blocks_h || self.blocks_w != layout.blocks_w {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x{}", channels, layout.blocks_h, layout.blocks_w),
                actual: format!("{}x{}x{}", self.channels, self.blocks_h, self.blocks_w),
            });
        }
        Ok(())
    }
}

/// Maximum over each block's `effective_block_size²` elements.
pub fn block_max(map: &ActivationMap, layout: &BlockGridLayout) -> Result<BlockStats> {
    layout.check_map(map)?;
    Ok(block_max_raw(map.data(), map.channels(), layout))
}

/// [`block_max`] over a raw `[C, H, W]` buffer already known to match `layout`.
pub fn block_max_raw(data: &[f32], channels: usize, layout: &BlockGridLayout) -> BlockStats {
    debug_assert_eq!(data.len(), channels * layout.height * layout.width);
    let s = layout.effective_block_size;
    let width = layout.width;
    let mut max_values = vec![f32::NEG_INFINITY; channels * layout.blocks_per_channel()];
    for c in 0..channels {
        for y in 0..layout.height {
            let i = y / s;
            let row = &data[(c * layout.height + y) * width..][..width];
            let out = &mut max_values[(c * layout.blocks_h + i) * layout.blocks_w..][..layout.blocks_w];
            for (j, chunk) in row.chunks_exact(s).enumerate() {
                out[j] = chunk.iter().copied().fold(out[j], f32::max);
            }
        }
    }
    BlockStats { channels, blocks_h: layout.blocks_h, blocks_w: layout.blocks_w, max_values }
}

/// A block is zeroed iff its maximum is `<= thresholds[c]`.
pub fn mask_from_thresholds(stats: &BlockStats, thresholds: &[f32]) -> Result<BlockMask> {
    if thresholds.len() != stats.channels {
        return Err(Error::LengthMismatch { expected: stats.channels, actual: thresholds.len() });
    }
    let per_channel = stats.blocks_h * stats.blocks_w;
    let keep = stats
        .max_values
        .iter()
        .enumerate()
        .map(|(idx, &m)| m > thresholds[idx / per_channel])
        .collect();
    Ok(BlockMask { channels: stats.channels, blocks_h: stats.blocks_h, blocks_w: stats.blocks_w, keep })
}

/// Zeroes every element of the pruned blocks; kept elements are copied verbatim.
pub fn apply_mask(map: &ActivationMap, mask: &BlockMask, layout: &BlockGridLayout) -> Result<ActivationMap> {
    layout.check_map(map)?;
    mask.check(map.channels(), layout)?;
    let mut data = map.data().to_vec();
    zero_masked_blocks(&mut data, mask, layout);
    Ok(map.with_data(data))
}

/// In-place variant of [`apply_mask`] over a raw `[C, H, W]` buffer.
pub fn zero_masked_blocks(data: &mut [f32], mask: &BlockMask, layout: &BlockGridLayout) {
    let s = layout.effective_block_size;
    let width = layout.width;
    for c in 0..mask.channels {
        for y in 0..layout.height {
            let i = y / s;
            let row = &mut data[(c * layout.height + y) * width..][..width];
            for (j, chunk) in row.chunks_exact_mut(s).enumerate() {
                if !mask.get(c, i, j) {
                    chunk.fill(0.0);
                }
            }
        }
    }
}

pub fn zero_block_fraction(mask: &BlockMask) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.zeroed_count() as f64 / mask.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, zero_prob: f64) -> ActivationMap {
        let data = (0..c * h * w)
            .map(|_| if rng.gen_bool(zero_prob) { 0.0 } else { rng.gen_range(0.0f32..1.0) })
            .collect();
        ActivationMap::new(data, c, h, w, "test").unwrap()
    }

    // Independent oracle: scan every element and compare against its block.
    fn brute_force_max(map: &ActivationMap, s: usize) -> Vec<f32> {
        let (c, h, w) = map.shape();
        let (bh, bw) = (h / s, w / s);
        let mut out = Vec::with_capacity(c * bh * bw);
        for ch in 0..c {
            for i in 0..bh {
                for j in 0..bw {
                    let mut m = f32::NEG_INFINITY;
                    for y in i * s..(i + 1) * s {
                        for x in j * s..(j + 1) * s {
                            if map.get(ch, y, x) > m {
                                m = map.get(ch, y, x);
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
        out
    }

    #[test]
    fn layout_examples() {
        let l = make_layout(32, 32, 4).unwrap();
        assert_eq!((l.effective_block_size, l.blocks_h, l.blocks_w), (4, 8, 8));
        let l = make_layout(2, 2, 4).unwrap();
        assert_eq!((l.effective_block_size, l.blocks_h, l.blocks_w), (2, 1, 1));
        assert!(matches!(make_layout(5, 5, 4), Err(Error::NotDivisible { .. })));
        assert!(make_layout(0, 4, 4).is_err());
        assert!(make_layout(4, 4, 0).is_err());
    }

    #[test]
    fn block_max_constant_and_zero() {
        let layout = make_layout(8, 8, 4).unwrap();
        let m = ActivationMap::filled(0.3, 2, 8, 8, "l").unwrap();
        assert!(block_max(&m, &layout).unwrap().max_values.iter().all(|&v| v == 0.3));
        let z = ActivationMap::zeros(2, 8, 8, "l").unwrap();
        assert!(block_max(&z, &layout).unwrap().max_values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_max_matches_brute_force_on_1x4x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_map(&mut rng, 1, 4, 4, 0.0);
        let layout = make_layout(4, 4, 2).unwrap();
        let stats = block_max(&m, &layout).unwrap();
        assert_eq!(stats.max_values.len(), 4);
        assert_eq!(stats.max_values, brute_force_max(&m, 2));
    }

    #[test]
    fn block_max_shape_mismatch() {
        let layout = make_layout(8, 8, 4).unwrap();
        let m = ActivationMap::zeros(1, 4, 4, "l").unwrap();
        assert!(matches!(block_max(&m, &layout), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn mask_examples() {
        let zero = BlockStats { channels: 2, blocks_h: 1, blocks_w: 2, max_values: vec![0.0; 4] };
        let m = mask_from_thresholds(&zero, &[0.0, 0.0]).unwrap();
        assert!(m.keep.iter().all(|k| !k));

        let stats = BlockStats { channels: 1, blocks_h: 2, blocks_w: 2, max_values: vec![0.7, 0.2, 0.4, 0.9] };
        let m = mask_from_thresholds(&stats, &[0.4]).unwrap();
        assert_eq!(m.keep, vec![true, false, false, true]);

        let m = mask_from_thresholds(&stats, &[-1.0]).unwrap();
        assert!(m.keep.iter().all(|k| *k));

        assert!(matches!(
            mask_from_thresholds(&stats, &[0.1, 0.2]),
            Err(Error::LengthMismatch { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn apply_mask_identity_annihilation_and_mixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = make_layout(8, 8, 4).unwrap();
        let m = random_map(&mut rng, 3, 8, 8, 0.2);

        let all = BlockMask::for_layout(3, &layout, true);
        assert_eq!(apply_mask(&m, &all, &layout).unwrap(), m);

        let none = BlockMask::for_layout(3, &layout, false);
        assert!(apply_mask(&m, &none, &layout).unwrap().data().iter().all(|v| v.to_bits() == 0));

        let keep: Vec<bool> = (0..12).map(|_| rng.gen_bool(0.5)).collect();
        let mask = BlockMask::new(3, 2, 2, keep).unwrap();
        let out = apply_mask(&m, &mask, &layout).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let expected = if mask.get(c, y / 4, x / 4) { m.get(c, y, x) } else { 0.0 };
                    assert_eq!(out.get(c, y, x).to_bits(), expected.to_bits());
                }
            }
        }

        let bad = BlockMask::all(2, 2, 2, true);
        assert!(apply_mask(&m, &bad, &layout).is_err());
    }

    #[test]
    fn zero_fraction_examples() {
        assert_eq!(zero_block_fraction(&BlockMask::all(2, 2, 2, true)), 0.0);
        assert_eq!(zero_block_fraction(&BlockMask::all(2, 2, 2, false)), 1.0);
        let mask = BlockMask::new(2, 2, 2, vec![false, true, false, true, true, false, true, true]).unwrap();
        assert_eq!(zero_block_fraction(&mask), 0.375);
    }

    #[test]
    fn block_max_matches_brute_force_up_to_8x32x32() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let c = rng.gen_range(1..=8);
            let s = [1usize, 2, 4, 8][rng.gen_range(0..4)];
            let h = s * rng.gen_range(1..=32 / s);
            let w = s * rng.gen_range(1..=32 / s);
            let m = random_map(&mut rng, c, h, w, 0.3);
            let layout = make_layout(h, w, s).unwrap();
            let s_eff = layout.effective_block_size;
            assert_eq!(block_max(&m, &layout).unwrap().max_values, brute_force_max(&m, s_eff));
        }
    }

    fn arb_map() -> impl Strategy<Value = (ActivationMap, usize)> {
        (1usize..=4, 1usize..=4, 1usize..=4, prop_oneof![Just(1usize), Just(2), Just(4)]).prop_flat_map(
            |(c, bh, bw, s)| {
                let n = c * bh * s * bw * s;
                proptest::collection::vec(prop_oneof![Just(0.0f32), 0.0f32..1.0], n).prop_map(move |data| {
                    (ActivationMap::new(data, c, bh * s, bw * s, "p").unwrap(), s)
                })
            },
        )
    }

    proptest! {
        #[test]
        fn apply_mask_is_idempotent((m, s) in arb_map(), t in 0.0f32..1.0) {
            let layout = make_layout(m.height(), m.width(), s).unwrap();
            let stats = block_max(&m, &layout).unwrap();
            let mask = mask_from_thresholds(&stats, &vec![t; m.channels()]).unwrap();
            let once = apply_mask(&m, &mask, &layout).unwrap();
            let twice = apply_mask(&once, &mask, &layout).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn raising_threshold_never_revives_a_block((m, s) in arb_map(), t in 0.0f32..1.0, dt in 0.0f32..0.5) {
            let layout = make_layout(m.height(), m.width(), s).unwrap();
            let stats = block_max(&m, &layout).unwrap();
            let lo = mask_from_thresholds(&stats, &vec![t; m.channels()]).unwrap();
            let hi = mask_from_thresholds(&stats, &vec![t + dt; m.channels()]).unwrap();
            for (a, b) in lo.keep.iter().zip(&hi.keep) {
                prop_assert!(*a || !*b);
            }
        }

        #[test]
        fn smaller_blocks_have_at_least_the_zero_fraction((m, _s) in arb_map()) {
            let t = vec![0.0; m.channels()];
            let mut fractions = Vec::new();
            for b in [1usize, 2, 4] {
                if m.height() % b == 0 && m.width() % b == 0 && b <= m.height().min(m.width()) {
                    let layout = make_layout(m.height(), m.width(), b).unwrap();
                    let stats = block_max(&m, &layout).unwrap();
                    fractions.push(zero_block_fraction(&mask_from_thresholds(&stats, &t).unwrap()));
                }
            }
            for w in fractions.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
        }
    }
}
