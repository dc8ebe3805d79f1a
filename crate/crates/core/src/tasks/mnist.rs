//! IDX ingestion and pixel-sequence construction.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::initializers::Rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct MnistImages {
    pub rows: usize,
    pub cols: usize,
    /// `count × rows × cols` bytes.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl MnistImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let a = self.rows * self.cols;
        &self.pixels[i * a..(i + 1) * a]
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Truncated {
            what,
            needed: at + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX image file: magic, count, rows, cols, then raw bytes.
pub fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let what = "IDX image file";
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            what,
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            what,
            needed,
            found: bytes.len(),
        });
    }
    Ok((rows, cols, bytes[16..needed].to_vec()))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let what = "IDX label file";
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            what,
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, what)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            what,
            needed,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..needed].to_vec())
}

pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<MnistImages> {
    let (rows, cols, pixels) = read_idx_images(&fs::read(images)?)?;
    let labels = read_idx_labels(&fs::read(labels)?)?;
    let area = rows * cols;
    let images = if area == 0 { 0 } else { pixels.len() / area };
    if images != labels.len() {
        return Err(Error::CountMismatch {
            images,
            labels: labels.len(),
        });
    }
    Ok(MnistImages {
        rows,
        cols,
        pixels,
        labels,
    })
}

pub fn write_idx_images<W: Write>(mut w: W, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let count = pixels.len() / (rows * cols).max(1);
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        w.write_all(&v.to_be_bytes())?;
    }
    w.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels<W: Write>(mut w: W, labels: &[u8]) -> Result<()> {
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    Ok(())
}

/// Seeded shuffle of `0..n`.
pub fn make_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    Rng::new(seed).split(0x9e37).shuffle(&mut p);
    p
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// 2×2 mean pooling of a row-major image with even sides.
pub fn downsample_2x2(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let (r2, c2) = (rows / 2, cols / 2);
    let mut out = Vec::with_capacity(r2 * c2);
    for r in 0..r2 {
        for c in 0..c2 {
            let at = |dr: usize, dc: usize| values[(2 * r + dr) * cols + 2 * c + dc];
            out.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
        }
    }
    out
}

/// Flattens an image in reading order, scales to `[0, 1]`, optionally
/// mean-pools 2×2, then reorders with `permutation` (output position `i`
/// takes pixel `permutation[i]`).
pub fn pixels_to_sequence(
    image: &[u8],
    rows: usize,
    cols: usize,
    permutation: Option<&[usize]>,
    downsample: bool,
) -> Result<Vec<f64>> {
    if image.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            op: "pixels_to_sequence",
            left: (rows, cols),
            right: (image.len(), 1),
        });
    }
    let mut seq: Vec<f64> = image.iter().map(|&p| p as f64 / 255.0).collect();
    if downsample {
        seq = downsample_2x2(&seq, rows, cols);
    }
    if let Some(perm) = permutation {
        if perm.len() != seq.len() {
            return Err(Error::DimensionMismatch {
                op: "pixel permutation",
                left: (seq.len(), 1),
                right: (perm.len(), 1),
            });
        }
        seq = perm.iter().map(|&i| seq[i]).collect();
    }
    Ok(seq)
}

/// Up to `total` indices with classes as balanced as the data allows,
/// each class taken in a seeded random order. Returned sorted.
pub fn stratified_subset(labels: &[u8], total: usize, seed: u64) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 256];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut rng = Rng::new(seed).split(0x57a7);
    for c in &mut by_class {
        rng.shuffle(c);
    }
    let mut cursors = vec![0usize; 256];
    let mut out = Vec::with_capacity(total);
    'fill: loop {
        let mut progressed = false;
        for (c, members) in by_class.iter().enumerate() {
            if out.len() == total {
                break 'fill;
            }
            if cursors[c] < members.len() {
                out.push(members[cursors[c]]);
                cursors[c] += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let pixels: Vec<u8> = (0..2 * 28 * 28).map(|i| (i * 7 % 256) as u8).collect();
        let mut img = Vec::new();
        write_idx_images(&mut img, 28, 28, &pixels).unwrap();
        let mut lab = Vec::new();
        write_idx_labels(&mut lab, &[3, 9]).unwrap();
        (img, lab)
    }

    #[test]
    fn fixture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture();
        std::fs::write(dir.path().join("i"), &img).unwrap();
        std::fs::write(dir.path().join("l"), &lab).unwrap();
        let m = load_mnist_idx(dir.path().join("i"), dir.path().join("l")).unwrap();
        assert_eq!((m.rows, m.cols, m.len()), (28, 28, 2));
        assert_eq!(m.labels, vec![3, 9]);
        assert_eq!(m.image(1)[0], ((784 * 7) % 256) as u8);
    }

    #[test]
    fn malformed_files_give_distinct_errors() {
        let (img, lab) = fixture();
        assert!(matches!(read_idx_images(&img[..100]), Err(Error::Truncated { .. })));
        assert!(matches!(read_idx_images(&img[..2]), Err(Error::Truncated { .. })));
        assert!(matches!(read_idx_images(&lab), Err(Error::BadMagic { .. })));
        assert!(matches!(read_idx_labels(&img), Err(Error::BadMagic { .. })));

        let dir = tempfile::tempdir().unwrap();
        let mut three = Vec::new();
        write_idx_labels(&mut three, &[1, 2, 3]).unwrap();
        std::fs::write(dir.path().join("i"), &img).unwrap();
        std::fs::write(dir.path().join("l"), &three).unwrap();
        assert!(matches!(
            load_mnist_idx(dir.path().join("i"), dir.path().join("l")),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));
    }

    #[test]
    fn permutation_properties() {
        let p = make_permutation(784, 0);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..784).collect::<Vec<_>>());
        assert_eq!(p, make_permutation(784, 0));
        let q = make_permutation(784, 1);
        let differing = p.iter().zip(&q).filter(|(a, b)| a != b).count();
        assert!(differing >= 700, "{differing}");
    }

    #[test]
    fn sequence_construction() {
        let zero = vec![0u8; 784];
        assert!(pixels_to_sequence(&zero, 28, 28, None, false)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));

        let img: Vec<u8> = (0..784).map(|i| (i % 251) as u8).collect();
        let plain = pixels_to_sequence(&img, 28, 28, None, false).unwrap();
        assert!(plain.iter().all(|v| (0.0..=1.0).contains(v)));
        let ident: Vec<usize> = (0..784).collect();
        assert_eq!(pixels_to_sequence(&img, 28, 28, Some(&ident), false).unwrap(), plain);

        let perm = make_permutation(784, 5);
        let permuted = pixels_to_sequence(&img, 28, 28, Some(&perm), false).unwrap();
        let inv = inverse_permutation(&perm);
        let back: Vec<f64> = inv.iter().map(|&i| permuted[i]).collect();
        assert_eq!(back, plain);

        let small = pixels_to_sequence(&img, 28, 28, None, true).unwrap();
        assert_eq!(small.len(), 196);
        let expect = (img[0] as f64 + img[1] as f64 + img[28] as f64 + img[29] as f64) / 255.0 / 4.0;
        assert!((small[0] - expect).abs() < 1e-15);
        assert!(pixels_to_sequence(&img, 28, 28, Some(&perm), true).is_err());
    }

    #[test]
    fn stratified_subset_balances_classes() {
        let labels: Vec<u8> = (0..1000).map(|i| (i % 10) as u8).collect();
        let s = stratified_subset(&labels, 95, 1);
        assert_eq!(s.len(), 95);
        let mut counts = [0; 10];
        for &i in &s {
            counts[labels[i] as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 9 || c == 10));
    }
}
