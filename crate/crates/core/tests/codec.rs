use std::path::PathBuf;

use proptest::prelude::*;
use zebra_core::bandwidth::{activation_storage, activation_storage_blocks, index_overhead, LayerSpec};
use zebra_core::codec::{decode, encode, encoded_size, read_raw_map, write_raw_map, Dtype, HEADER_LEN};
use zebra_core::{apply_mask, make_layout, ActivationMap, BlockMask};

fn fixture(name: &str) -> Vec<u8> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn golden_f32_fixture() {
    let map = read_raw_map(&fixture("mixed_2x4x4.raw"), "g").unwrap();
    let mask = BlockMask::new(2, 2, 2, vec![true, false, false, true, false, true, true, true]).unwrap();
    let golden = fixture("mixed_2x4x4_b2_f32.zbra");
    assert_eq!(encode(&map, &mask, 2, Dtype::F32).unwrap(), golden);
    let (decoded, got) = decode(&golden).unwrap();
    assert_eq!(got, mask);
    assert_eq!(decoded.data(), apply_mask(&map, &mask, &make_layout(4, 4, 2).unwrap()).unwrap().data());
}

#[test]
fn golden_u8_fixture_with_padded_bitmask() {
    let map = read_raw_map(&fixture("mixed_3x2x6.raw"), "g").unwrap();
    let keep = vec![true, true, false, false, false, true, true, false, true];
    let mask = BlockMask::new(3, 1, 3, keep).unwrap();
    let golden = fixture("mixed_3x2x6_b2_u8.zbra");
    let bytes = encode(&map, &mask, 2, Dtype::U8).unwrap();
    assert_eq!(bytes, golden);
    assert_eq!(&bytes[HEADER_LEN..HEADER_LEN + 2], &[0b1100_0110, 0b1000_0000]);
    assert_eq!(decode(&golden).unwrap().1, mask);
}

#[test]
fn raw_map_round_trip_and_errors() {
    let raw = fixture("mixed_2x4x4.raw");
    let map = read_raw_map(&raw, "r").unwrap();
    assert_eq!(map.shape(), (2, 4, 4));
    assert_eq!(write_raw_map(&map), raw);
    assert!(read_raw_map(&raw[..raw.len() - 1], "r").is_err());
    let mut extra = raw.clone();
    extra.push(0);
    assert!(read_raw_map(&extra, "r").is_err());
}

#[derive(Debug, Clone)]
struct Fixture {
    map: ActivationMap,
    mask: BlockMask,
    block: usize,
    dtype: Dtype,
}

fn value_for(dtype: Dtype, raw: u32) -> f32 {
    match dtype {
        // Arbitrary finite non-negative f32 bit patterns.
        Dtype::F32 => f32::from_bits(raw % 0x7f00_0000),
        Dtype::F16 => half::f16::from_bits((raw % 0x7c00) as u16).to_f32(),
        Dtype::U8 => (raw % 256) as f32,
    }
}

fn arb_fixture(max_c: usize, max_blocks: usize) -> impl Strategy<Value = Fixture> {
    (
        1usize..=max_c,
        1usize..=max_blocks,
        1usize..=max_blocks,
        prop_oneof![Just(1usize), Just(2), Just(4), Just(8)],
        prop_oneof![Just(Dtype::F32), Just(Dtype::F16), Just(Dtype::U8)],
        any::<u64>(),
    )
        .prop_map(|(c, bh, bw, s, dtype, seed)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (bh * s, bw * s);
            let data = (0..c * h * w).map(|_| value_for(dtype, rng.gen())).collect();
            let map = ActivationMap::new(data, c, h, w, "f").unwrap();
            let p_keep: f64 = rng.gen();
            let keep = (0..c * bh * bw).map(|_| rng.gen_bool(p_keep)).collect();
            Fixture { map, mask: BlockMask::new(c, bh, bw, keep).unwrap(), block: s, dtype }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn round_trip_is_bit_exact(f in arb_fixture(8, 8)) {
        let bytes = encode(&f.map, &f.mask, f.block, f.dtype).unwrap();
        let (decoded, mask) = decode(&bytes).unwrap();
        let layout = make_layout(f.map.height(), f.map.width(), f.block).unwrap();
        let expected = apply_mask(&f.map, &f.mask, &layout).unwrap();
        prop_assert_eq!(&mask, &f.mask);
        for (a, b) in decoded.data().iter().zip(expected.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn size_formula_and_popcount_agree(f in arb_fixture(8, 8)) {
        let bytes = encode(&f.map, &f.mask, f.block, f.dtype).unwrap();
        let kept = f.mask.kept_count();
        let (c, h, w) = f.map.shape();
        prop_assert_eq!(bytes.len(), encoded_size(c, h, w, f.block, f.dtype.bits(), kept));
        let n = f.mask.len();
        let popcount: u32 = bytes[HEADER_LEN..HEADER_LEN + n.div_ceil(8)].iter().map(|b| b.count_ones()).sum();
        prop_assert_eq!(popcount as usize, kept);
        let payload = bytes.len() - HEADER_LEN - n.div_ceil(8);
        prop_assert_eq!(payload, kept * f.block * f.block * f.dtype.bits() / 8);
    }

    #[test]
    fn zeroing_more_blocks_never_grows_the_stream(f in arb_fixture(4, 6), extra in any::<u64>()) {
        let before = encode(&f.map, &f.mask, f.block, f.dtype).unwrap().len();
        let mut fewer = f.mask.clone();
        let idx = (extra as usize) % fewer.keep.len();
        fewer.keep[idx] = false;
        let after = encode(&f.map, &fewer, f.block, f.dtype).unwrap().len();
        prop_assert!(after <= before);
    }

    #[test]
    fn codec_reconciles_with_bandwidth_model(f in arb_fixture(8, 8)) {
        let (c, h, w) = f.map.shape();
        let layer = LayerSpec {
            layer_id: "f".into(), channels: c, height: h, width: w,
            block_size: f.block, bits: f.dtype.bits(), consumer: None,
        };
        let bytes = encode(&f.map, &f.mask, f.block, f.dtype).unwrap();
        let kept = f.mask.kept_count() as u64;
        let n_blocks = f.mask.len() as u64;
        let stored = activation_storage_blocks(&layer, kept);
        let index = index_overhead(&layer).unwrap();
        let padding = n_blocks.div_ceil(8) * 8 - n_blocks;
        prop_assert_eq!(index, n_blocks);
        prop_assert_eq!(bytes.len() as u64 * 8, HEADER_LEN as u64 * 8 + index + padding + stored);
        let s = kept as f64 / n_blocks as f64;
        prop_assert!((activation_storage(&layer, s) - stored as f64).abs() <= 1e-6 * stored.max(1) as f64);
    }
}

#[test]
fn round_trip_at_64_cubed() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(64);
    for dtype in [Dtype::F32, Dtype::F16, Dtype::U8] {
        let data = (0..64 * 64 * 64).map(|_| value_for(dtype, rng.gen())).collect();
        let map = ActivationMap::new(data, 64, 64, 64, "big").unwrap();
        let keep = (0..64 * 16 * 16).map(|_| rng.gen_bool(0.4)).collect();
        let mask = BlockMask::new(64, 16, 16, keep).unwrap();
        let bytes = encode(&map, &mask, 4, dtype).unwrap();
        let (decoded, got) = decode(&bytes).unwrap();
        assert_eq!(got, mask);
        let expected = apply_mask(&map, &mask, &make_layout(64, 64, 4).unwrap()).unwrap();
        assert!(decoded.data().iter().zip(expected.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
