//! Labelled image datasets: the CIFAR binary reader, a seeded coloured-shapes
//! generator and client partitioning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::color::hsv_to_rgb;
use crate::delta_e::delta_e2000;
use crate::error::{Error, Result};
use crate::image::{quantize, write_file, Image};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Cifar10,
    Cifar100,
    Shapes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub provenance: Provenance,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }

    /// Copy restricted to the given sample indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            name: self.name.clone(),
            provenance: self.provenance,
            classes: self.classes,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Writes `NNNNN.ppm` per sample plus `labels.csv` (`index,label`).
    pub fn dump(&self, dir: &Path) -> Result<()> {
        let mut csv = String::from("index,label\n");
        for (i, s) in self.samples.iter().enumerate() {
            s.image.write_ppm(&dir.join(format!("{i:05}.ppm")))?;
            csv.push_str(&format!("{i},{}\n", s.label));
        }
        write_file(&dir.join("labels.csv"), csv.as_bytes())
    }
}

pub const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR10_RECORD: usize = 1 + 3 * CIFAR_PIXELS;
pub const CIFAR100_RECORD: usize = 2 + 3 * CIFAR_PIXELS;

fn decode_cifar_pixels(bytes: &[u8]) -> Image {
    Image::from_fn(CIFAR_SIDE, CIFAR_SIDE, |y, x| {
        let i = y * CIFAR_SIDE + x;
        [
            bytes[i] as f64 / 255.0,
            bytes[CIFAR_PIXELS + i] as f64 / 255.0,
            bytes[2 * CIFAR_PIXELS + i] as f64 / 255.0,
        ]
    })
}

/// Decodes CIFAR-10 binary records (label byte + 3072 channel-planar
/// pixels). `limit` keeps only the first records.
pub fn decode_cifar10(bytes: &[u8], limit: Option<usize>) -> Result<LabeledDataset> {
    if bytes.len() % CIFAR10_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 data has {} bytes, not a multiple of {CIFAR10_RECORD}",
            bytes.len()
        )));
    }
    let take = limit.unwrap_or(usize::MAX);
    let mut samples = Vec::new();
    for record in bytes.chunks_exact(CIFAR10_RECORD).take(take) {
        let label = record[0] as usize;
        if label > 9 {
            return Err(Error::Format(format!("CIFAR-10 label byte {label} > 9")));
        }
        samples.push(Sample {
            image: decode_cifar_pixels(&record[1..]),
            label,
        });
    }
    Ok(LabeledDataset {
        name: "cifar10".into(),
        provenance: Provenance::Cifar10,
        classes: 10,
        samples,
    })
}

/// CIFAR-100 variant: coarse and fine label bytes, the fine label is kept.
pub fn decode_cifar100(bytes: &[u8], limit: Option<usize>) -> Result<LabeledDataset> {
    if bytes.len() % CIFAR100_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR-100 data has {} bytes, not a multiple of {CIFAR100_RECORD}",
            bytes.len()
        )));
    }
    let take = limit.unwrap_or(usize::MAX);
    let mut samples = Vec::new();
    for record in bytes.chunks_exact(CIFAR100_RECORD).take(take) {
        let (coarse, fine) = (record[0], record[1] as usize);
        if coarse > 19 || fine > 99 {
            return Err(Error::Format(format!("CIFAR-100 labels ({coarse}, {fine}) out of range")));
        }
        samples.push(Sample {
            image: decode_cifar_pixels(&record[2..]),
            label: fine,
        });
    }
    Ok(LabeledDataset {
        name: "cifar100".into(),
        provenance: Provenance::Cifar100,
        classes: 100,
        samples,
    })
}

/// Re-encodes 32×32 samples as CIFAR-10 records (pixels quantised).
pub fn encode_cifar10(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(samples.len() * CIFAR10_RECORD);
    for s in samples {
        if s.image.height() != CIFAR_SIDE || s.image.width() != CIFAR_SIDE || s.label > 9 {
            return Err(Error::invalid("CIFAR-10 records need 32x32 images and labels < 10"));
        }
        out.push(s.label as u8);
        for c in 0..3 {
            out.extend(s.image.pixels().map(|p| quantize(p[c])));
        }
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads CIFAR-10 from a single batch file, or from a directory holding
/// `data_batch_1.bin` … `data_batch_5.bin`.
pub fn load_cifar10(path: &Path, limit: Option<usize>) -> Result<LabeledDataset> {
    if path.is_dir() {
        let mut bytes = Vec::new();
        for i in 1..=5 {
            let file = path.join(format!("data_batch_{i}.bin"));
            bytes.extend(read(&file)?);
            if let Some(l) = limit {
                if bytes.len() >= l * CIFAR10_RECORD {
                    break;
                }
            }
        }
        return decode_cifar10(&bytes, limit);
    }
    decode_cifar10(&read(path)?, limit)
}

/// Loads the CIFAR-10 test batch (`test_batch.bin`) from a directory or file.
pub fn load_cifar10_test(path: &Path, limit: Option<usize>) -> Result<LabeledDataset> {
    let file = if path.is_dir() { path.join("test_batch.bin") } else { path.to_path_buf() };
    decode_cifar10(&read(&file)?, limit)
}

pub fn load_cifar100(path: &Path, limit: Option<usize>) -> Result<LabeledDataset> {
    decode_cifar100(&read(path)?, limit)
}

/// Shape drawn for each class of the synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    TriangleUp,
    Diamond,
    Plus,
    Cross,
    Ring,
    HorizontalBar,
    VerticalBar,
    TriangleDown,
}

pub const SHAPES: [Shape; 10] = [
    Shape::Circle,
    Shape::Square,
    Shape::TriangleUp,
    Shape::Diamond,
    Shape::Plus,
    Shape::Cross,
    Shape::Ring,
    Shape::HorizontalBar,
    Shape::VerticalBar,
    Shape::TriangleDown,
];

impl Shape {
    /// Membership test in coordinates normalised by the shape radius.
    pub fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Shape::TriangleUp => (-0.9..=0.9).contains(&v) && u.abs() <= (v + 0.9) / 1.8,
            Shape::TriangleDown => (-0.9..=0.9).contains(&v) && u.abs() <= (0.9 - v) / 1.8,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Plus => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Cross => {
                ((u - v).abs() <= 0.4 || (u + v).abs() <= 0.4) && u.abs() <= 0.9 && v.abs() <= 0.9
            }
            Shape::Ring => (0.55..=1.0).contains(&(u * u + v * v)),
            Shape::HorizontalBar => u.abs() <= 1.0 && v.abs() <= 0.4,
            Shape::VerticalBar => u.abs() <= 0.4 && v.abs() <= 1.0,
        }
    }
}

/// Minimum ΔE00 between shape and background colour.
pub const MIN_FG_BG_DELTA_E: f64 = 10.0;

/// Base hue of a class's foreground colour.
pub fn class_hue(class: usize, classes: usize) -> f64 {
    class as f64 / classes as f64
}

/// One synthetic sample with its ground-truth shape mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample {
    pub sample: Sample,
    pub mask: Vec<bool>,
    pub foreground: [f64; 3],
    pub background: [f64; 3],
}

/// Seeded coloured-shapes dataset with the shape masks.
pub fn generate_shapes_with_masks(n: usize, classes: usize, size: usize, seed: u64) -> Result<Vec<ShapeSample>> {
    if !(2..=10).contains(&classes) {
        return Err(Error::invalid(format!("shapes needs 2..=10 classes, got {classes}")));
    }
    if size < 16 {
        return Err(Error::invalid(format!("shapes needs size >= 16, got {size}")));
    }
    let mut rng = seed::rng_for(seed, &[0x5A9E]);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let shape = SHAPES[label];
        let hue = (class_hue(label, classes) + rng.random_range(-0.02..0.02)).rem_euclid(1.0);
        let fg = hsv_to_rgb([hue, rng.random_range(0.6..1.0), rng.random_range(0.6..1.0)]);
        let mut bg;
        loop {
            bg = hsv_to_rgb([
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..0.35),
                rng.random_range(0.15..0.9),
            ]);
            if delta_e2000(fg, bg) >= MIN_FG_BG_DELTA_E {
                break;
            }
        }
        let s = size as f64;
        let radius = s * rng.random_range(0.26..0.36);
        let cy = s / 2.0 + rng.random_range(-s / 8.0..s / 8.0);
        let cx = s / 2.0 + rng.random_range(-s / 8.0..s / 8.0);
        let mut mask = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 + 0.5 - cx) / radius;
                let v = (y as f64 + 0.5 - cy) / radius;
                mask.push(shape.contains(u, v));
            }
        }
        let image = Image::from_fn(size, size, |y, x| {
            let base = if mask[y * size + x] { fg } else { bg };
            base.map(|c| (c + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0))
        });
        out.push(ShapeSample {
            sample: Sample { image, label },
            mask,
            foreground: fg,
            background: bg,
        });
    }
    Ok(out)
}

/// Seeded coloured-shapes dataset: one shape per class on a plain
/// background, class-correlated foreground hue.
pub fn generate_shapes(n: usize, classes: usize, size: usize, seed: u64) -> Result<LabeledDataset> {
    let samples = generate_shapes_with_masks(n, classes, size, seed)?
        .into_iter()
        .map(|s| s.sample)
        .collect();
    Ok(LabeledDataset {
        name: format!("shapes{classes}"),
        provenance: Provenance::Shapes,
        classes,
        samples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    LabelSkew,
}

/// Fraction of a label-skewed client's data drawn from its two classes.
pub const DOMINANT_FRACTION: f64 = 0.8;

fn split_sizes(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

/// Splits `data` across `n_clients` without loss or duplication.
pub fn partition(
    data: &LabeledDataset,
    n_clients: usize,
    mode: PartitionMode,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    if n_clients == 0 {
        return Err(Error::invalid("cannot partition across zero clients"));
    }
    if n_clients > data.len() {
        return Err(Error::invalid(format!(
            "{n_clients} clients but only {} samples",
            data.len()
        )));
    }
    let sizes = split_sizes(data.len(), n_clients);
    let mut rng = seed::rng_for(seed, &[0x9A27]);
    let assignments: Vec<Vec<usize>> = match mode {
        PartitionMode::Iid => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            let mut start = 0;
            sizes
                .iter()
                .map(|&n| {
                    let part = order[start..start + n].to_vec();
                    start += n;
                    part
                })
                .collect()
        }
        PartitionMode::LabelSkew => {
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); data.classes];
            for (i, s) in data.samples.iter().enumerate() {
                pools[s.label].push(i);
            }
            for p in &mut pools {
                p.shuffle(&mut rng);
            }
            let mut parts: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
            for (client, part) in parts.iter_mut().enumerate() {
                let dominant = [(2 * client) % data.classes, (2 * client + 1) % data.classes];
                let quota = (DOMINANT_FRACTION * sizes[client] as f64).round() as usize;
                let mut turn = 0;
                while part.len() < quota {
                    let class = dominant[turn % 2];
                    let other = dominant[(turn + 1) % 2];
                    turn += 1;
                    if let Some(i) = pools[class].pop().or_else(|| pools[other].pop()) {
                        part.push(i);
                    } else {
                        break;
                    }
                }
            }
            let mut rest: Vec<usize> = pools.into_iter().flatten().collect();
            rest.sort_unstable();
            rest.shuffle(&mut rng);
            let mut rest = rest.into_iter();
            for (part, &size) in parts.iter_mut().zip(&sizes) {
                while part.len() < size {
                    part.push(rest.next().expect("sizes sum to the dataset length"));
                }
            }
            parts
        }
    };
    Ok(assignments.iter().map(|idx| data.subset(idx)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::fg_bg_contrast;
    use proptest::prelude::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3 * CIFAR_PIXELS).map(fill));
        r
    }

    #[test]
    fn decodes_single_white_record() {
        let ds = decode_cifar10(&record(3, |_| 255), None).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.samples[0].label, 3);
        assert!(ds.samples[0].image.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn limit_truncates_from_front() {
        let mut bytes = record(1, |_| 0);
        bytes.extend(record(2, |_| 9));
        assert!(decode_cifar10(&bytes, Some(0)).unwrap().is_empty());
        let one = decode_cifar10(&bytes, Some(1)).unwrap();
        assert_eq!(one.samples[0].label, 1);
    }

    #[test]
    fn channel_planes_decode_independently() {
        // byte value encodes (plane, pixel) so every position is checkable
        let fill = |i: usize| ((i / CIFAR_PIXELS) * 80 + (i % CIFAR_PIXELS) % 7) as u8;
        let mut bytes = record(7, fill);
        bytes.extend(record(0, |i| 255 - fill(i)));
        let ds = decode_cifar10(&bytes, None).unwrap();
        assert_eq!(ds.len(), 2);
        for (s, invert) in ds.samples.iter().zip([false, true]) {
            for y in 0..CIFAR_SIDE {
                for x in 0..CIFAR_SIDE {
                    let p = s.image.pixel(y, x);
                    for c in 0..3 {
                        let raw = fill(c * CIFAR_PIXELS + y * CIFAR_SIDE + x);
                        let b = if invert { 255 - raw } else { raw };
                        assert_eq!(p[c], b as f64 / 255.0);
                    }
                }
            }
        }
        assert_eq!(encode_cifar10(&ds.samples).unwrap(), bytes);
    }

    #[test]
    fn rejects_malformed_cifar() {
        assert!(decode_cifar10(&[0u8; 100], None).is_err());
        assert!(decode_cifar10(&record(10, |_| 0), None).is_err());
        let mut r100 = vec![3u8, 42];
        r100.extend(vec![0u8; 3 * CIFAR_PIXELS]);
        let ds = decode_cifar100(&r100, None).unwrap();
        assert_eq!(ds.samples[0].label, 42);
        assert_eq!(ds.classes, 100);
    }

    #[test]
    fn shapes_are_deterministic_and_contrasted() {
        let a = generate_shapes_with_masks(40, 10, 16, 5).unwrap();
        let b = generate_shapes_with_masks(40, 10, 16, 5).unwrap();
        assert_eq!(a, b);
        for s in &a {
            let c = fg_bg_contrast(&s.sample.image, &s.mask).unwrap();
            assert!(c.norm() > 0.0);
            assert!(delta_e2000(s.foreground, s.background) >= MIN_FG_BG_DELTA_E);
        }
        assert!(generate_shapes(10, 1, 16, 0).is_err());
        assert!(generate_shapes(10, 11, 16, 0).is_err());
        assert!(generate_shapes(10, 2, 15, 0).is_err());
    }

    #[test]
    fn class_shapes_are_distinct() {
        // sample every shape on a grid; no two masks coincide
        let grid: Vec<Vec<bool>> = SHAPES
            .iter()
            .map(|s| {
                (0..400)
                    .map(|i| s.contains((i % 20) as f64 / 9.5 - 1.0, (i / 20) as f64 / 9.5 - 1.0))
                    .collect()
            })
            .collect();
        for i in 0..grid.len() {
            for j in i + 1..grid.len() {
                assert_ne!(grid[i], grid[j], "{:?} vs {:?}", SHAPES[i], SHAPES[j]);
            }
        }
    }

    #[test]
    fn partition_examples() {
        let ds = generate_shapes(10, 2, 16, 1).unwrap();
        let whole = partition(&ds, 1, PartitionMode::Iid, 3).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].len(), 10);
        let two = partition(&ds, 2, PartitionMode::Iid, 3).unwrap();
        assert_eq!(two.iter().map(LabeledDataset::len).collect::<Vec<_>>(), vec![5, 5]);
        assert!(partition(&ds, 0, PartitionMode::Iid, 3).is_err());
        assert!(partition(&ds, 11, PartitionMode::Iid, 3).is_err());
    }

    fn fingerprint(s: &Sample) -> (usize, Vec<u64>) {
        (s.label, s.image.data().iter().map(|v| v.to_bits()).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn partitions_cover_the_input_exactly(
            n in 4usize..60,
            clients in 1usize..8,
            classes in 2usize..6,
            skew in proptest::bool::ANY,
            seed in 0u64..1000,
        ) {
            prop_assume!(clients <= n);
            let ds = generate_shapes(n, classes, 16, seed).unwrap();
            let mode = if skew { PartitionMode::LabelSkew } else { PartitionMode::Iid };
            let parts = partition(&ds, clients, mode, seed).unwrap();
            prop_assert_eq!(parts.len(), clients);
            let sizes: Vec<usize> = parts.iter().map(LabeledDataset::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut got: Vec<_> = parts.iter().flat_map(|p| p.samples.iter().map(fingerprint)).collect();
            let mut want: Vec<_> = ds.samples.iter().map(fingerprint).collect();
            got.sort();
            want.sort();
            prop_assert_eq!(got, want);
        }
    }
}
