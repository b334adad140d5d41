use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::CheckReport;
use crate::io::{Container, ContainerError, EntryData};
use crate::rng;

fn random_f32(r: &mut ChaCha8Rng) -> f32 {
    match r.random_range(0..10) {
        // arbitrary bit patterns: NaN payloads, infinities, subnormals, -0
        0 => f32::from_bits(r.random()),
        1 => [0.0, -0.0, f32::INFINITY, f32::NEG_INFINITY, f32::MIN_POSITIVE / 8.0][r.random_range(0..5)],
        _ => r.random_range(-10.0..10.0),
    }
}

fn random_id(r: &mut ChaCha8Rng, k: usize) -> String {
    let stems = ["img", "患者", "a/b", "x y", "IDRiD_", "é"];
    format!("{}{k}_{}", stems[r.random_range(0..stems.len())], r.random_range(0..1000))
}

/// A container with 0-12 entries of random kinds and shapes.
pub fn random_container(r: &mut ChaCha8Rng) -> Container {
    let meta = match r.random_range(0..3) {
        0 => String::new(),
        1 => format!("{{\"seed\":{}}}", r.random::<u32>()),
        _ => "{\"note\":\"ünïcödé ✓\"}".to_string(),
    };
    let mut c = Container::new(meta);
    for k in 0..r.random_range(0..=12) {
        let data = match r.random_range(0..3) {
            0 => EntryData::Global((0..r.random_range(1..70)).map(|_| random_f32(r)).collect()),
            1 => {
                let (channels, height, width) = (r.random_range(1..6), r.random_range(1..5), r.random_range(1..5));
                EntryData::FeatureMap {
                    channels,
                    height,
                    width,
                    values: (0..channels * height * width).map(|_| random_f32(r)).collect(),
                }
            }
            _ => {
                let shape: Vec<usize> = (0..r.random_range(1..5)).map(|_| r.random_range(1..5)).collect();
                let len = shape.iter().product();
                EntryData::Tensor {
                    shape,
                    values: (0..len).map(|_| random_f32(r)).collect(),
                }
            }
        };
        c.push(random_id(r, k), data).expect("ids are unique");
    }
    c
}

fn bitwise_equal(a: &Container, b: &Container) -> bool {
    a.entries().len() == b.entries().len()
        && a.meta == b.meta
        && a.entries().iter().zip(b.entries()).all(|(x, y)| x.id == y.id && x.data.bitwise_eq(&y.data))
}

/// Serialise and parse `count` random containers; both the parsed value and
/// the re-serialised bytes must match bit for bit.
pub fn container_roundtrip(count: usize, seed: u64) -> CheckReport {
    let mut rep = CheckReport::new("container round-trip", 0.0);
    for k in 0..count {
        let mut r = rng::stream(seed, &[0xc047, k as u64]);
        let c = random_container(&mut r);
        let bytes = c.to_bytes();
        match Container::from_bytes(&bytes) {
            Ok(back) if bitwise_equal(&c, &back) && back.to_bytes() == bytes => rep.record(0.0, String::new),
            Ok(_) => rep.fail(format!("container {k}: round-trip changed contents")),
            Err(e) => rep.fail(format!("container {k}: {e}")),
        }
    }
    rep
}

/// Corrupt random containers in each of four ways and require the reader to
/// report the matching error: wrong magic, unknown version, a flipped bit
/// after the header, and truncation at a random length.
pub fn container_corruption(count: usize, seed: u64) -> CheckReport {
    let mut rep = CheckReport::new("container corruption detection", 0.0);
    for k in 0..count {
        let mut r = rng::stream(seed, &[0xbad, k as u64]);
        let bytes = random_container(&mut r).to_bytes();

        let mut b = bytes.clone();
        b[r.random_range(0..4)] ^= 1 << r.random_range(0..8);
        expect(&mut rep, k, "magic", Container::from_bytes(&b), |e| matches!(e, ContainerError::BadMagic { .. }));

        let mut b = bytes.clone();
        let v = *[0u32, 2, 7, u32::MAX].choose(&mut r).expect("nonempty");
        b[4..8].copy_from_slice(&v.to_le_bytes());
        expect(&mut rep, k, "version", Container::from_bytes(&b), |e| {
            matches!(e, ContainerError::UnsupportedVersion { .. })
        });

        // Any single flipped bit past the version field must be caught by
        // the checksum (or, for flips in the trailer itself, as a mismatch).
        let mut b = bytes.clone();
        let pos = r.random_range(8..b.len());
        b[pos] ^= 1 << r.random_range(0..8);
        expect(&mut rep, k, "bit flip", Container::from_bytes(&b), |e| {
            matches!(e, ContainerError::ChecksumMismatch { .. } | ContainerError::Truncated { .. } | ContainerError::Malformed(_))
        });

        let cut = r.random_range(0..bytes.len());
        expect(&mut rep, k, "truncation", Container::from_bytes(&bytes[..cut]), |e| {
            matches!(e, ContainerError::Truncated { .. } | ContainerError::ChecksumMismatch { .. } | ContainerError::Malformed(_))
        });
    }
    rep
}

fn expect(
    rep: &mut CheckReport,
    k: usize,
    what: &str,
    got: Result<Container, ContainerError>,
    ok: impl Fn(&ContainerError) -> bool,
) {
    match got {
        Err(e) if ok(&e) => rep.record(0.0, String::new),
        Err(e) => rep.fail(format!("container {k}, {what}: unexpected error {e}")),
        Ok(_) => rep.fail(format!("container {k}, {what}: corruption not detected")),
    }
}
