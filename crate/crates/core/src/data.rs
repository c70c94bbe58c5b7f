//! Synthetic dataset generation and loading.
//!
//! Classes are procedural shapes (circle, square, triangle, cross) in a
//! color palette, drawn with jittered position and scale plus additive
//! Gaussian noise. Images are binary PPM (P6); `index.csv` lists
//! `filename,label,split` with a seeded 80/10/10 train/val/test split.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

pub const SHAPES: usize = 4;
const PALETTE: [[f64; 3]; 6] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.40, 0.90],
    [0.20, 0.80, 0.30],
    [0.92, 0.80, 0.15],
    [0.80, 0.25, 0.80],
    [0.25, 0.80, 0.80],
];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SyntheticDatasetSpec {
    pub classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            classes: 8,
            images_per_class: 250,
            image_size: 32,
            noise_sigma: 0.03,
            seed: 11,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("dataset: need at least 2 classes".into()));
        }
        if self.classes > SHAPES * PALETTE.len() {
            return Err(Error::Config(format!(
                "dataset: at most {} classes supported",
                SHAPES * PALETTE.len()
            )));
        }
        if self.images_per_class == 0 || self.image_size < 8 {
            return Err(Error::Config("dataset: empty class or image size < 8".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Record {
    pub filename: String,
    pub label: usize,
    pub split: Split,
}

/// In-memory dataset: one tensor per image, `[3,S,S]`, values in [0,1].
pub struct Dataset {
    pub records: Vec<Record>,
    pub images: Vec<Tensor<f32>>,
    pub classes: usize,
    pub image_size: usize,
}

impl Dataset {
    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    /// Stack a list of images into a `[B,3,S,S]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
        }
        Tensor::from_vec(vec![indices.len(), 3, s, s], data).unwrap()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.records[i].label).collect()
    }
}

fn render_image(class: usize, size: usize, noise_sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let shape = class % SHAPES;
    let color = PALETTE[class / SHAPES];
    let s = size as f64;
    let cx = s * (0.5 + rng.gen_range(-0.15..0.15));
    let cy = s * (0.5 + rng.gen_range(-0.15..0.15));
    let r = s * rng.gen_range(0.22..0.34);
    let bg = 0.12 + rng.gen_range(-0.04..0.04);
    let normal = Normal::new(0.0, noise_sigma.max(0.0)).unwrap();

    let mut out = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = match shape {
                0 => (dx * dx + dy * dy).sqrt() <= r,
                1 => dx.abs().max(dy.abs()) <= r * 0.85,
                2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
                _ => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
            };
            for c in 0..3 {
                let base = if inside { color[c] } else { bg };
                let v = base + if noise_sigma > 0.0 { normal.sample(rng) } else { 0.0 };
                out[(c * size + y) * size + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Write one image as binary PPM (P6, 8-bit).
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape()[1];
    let mut bytes = Vec::with_capacity(32 + 3 * s * s);
    bytes.extend_from_slice(format!("P6\n{s} {s}\n255\n").as_bytes());
    for y in 0..s {
        for x in 0..s {
            for c in 0..3 {
                let v = image.data()[(c * s + y) * s + x];
                bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a binary PPM into a `[3,S,S]` tensor.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let mut f = BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    let mut header = Vec::new();
    let mut fields = Vec::new();
    // P6, width, height, maxval; comments allowed
    while fields.len() < 4 {
        header.clear();
        f.read_until(b'\n', &mut header)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let line = String::from_utf8_lossy(&header);
        let line = line.trim();
        if line.starts_with('#') {
            continue;
        }
        fields.extend(line.split_whitespace().map(|t| t.to_string()));
    }
    if fields[0] != "P6" {
        return Err(Error::Format(format!("{}: not a P6 PPM", path.display())));
    }
    let w: usize = fields[1].parse().map_err(|_| Error::Format("bad PPM width".into()))?;
    let h: usize = fields[2].parse().map_err(|_| Error::Format("bad PPM height".into()))?;
    if fields[3] != "255" {
        return Err(Error::Format("only 8-bit PPM supported".into()));
    }
    let mut payload = vec![0u8; 3 * w * h];
    f.read_exact(&mut payload)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut data = vec![0.0f32; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = payload[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

/// Generate the dataset into a directory: PPM files plus `index.csv`.
/// Identical specs produce byte-identical directories.
pub fn generate_dataset(spec: &SyntheticDatasetSpec, out_dir: &Path) -> Result<()> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let total = spec.classes * spec.images_per_class;

    // seeded split assignment over all images
    let mut split_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x51_17));
    let mut order: Vec<usize> = (0..total).collect();
    for i in (1..order.len()).rev() {
        let j = split_rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (total as f64 * 0.8).round() as usize;
    let n_val = (total as f64 * 0.1).round() as usize;
    let mut splits = vec![Split::Test; total];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut index = String::from("filename,label,split\n");
    for class in 0..spec.classes {
        for k in 0..spec.images_per_class {
            let flat = class * spec.images_per_class + k;
            let mut rng = ChaCha8Rng::seed_from_u64(
                spec.seed
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add(flat as u64),
            );
            let pixels = render_image(class, spec.image_size, spec.noise_sigma, &mut rng);
            let t = Tensor::from_vec(vec![3, spec.image_size, spec.image_size], pixels)?;
            let filename = format!("img_{class:02}_{k:04}.ppm");
            write_ppm(&out_dir.join(&filename), &t)?;
            index.push_str(&format!("{filename},{class},{}\n", splits[flat]));
        }
    }
    std::fs::write(out_dir.join("index.csv"), index)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))
}

/// Load a generated dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join("index.csv");
    let content = std::fs::read_to_string(&index_path)
        .map_err(|e| Error::io(index_path.display().to_string(), e))?;
    let mut records = Vec::new();
    let mut images = Vec::new();
    let mut classes = 0usize;
    let mut image_size = 0usize;
    for (lineno, line) in content.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!("index.csv line {lineno}: expected 3 fields")));
        }
        let label: usize = parts[1]
            .parse()
            .map_err(|_| Error::Format(format!("index.csv line {lineno}: bad label")))?;
        let split = match parts[2] {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(Error::Format(format!("unknown split '{other}'"))),
        };
        let img = read_ppm(&dir.join(parts[0]))?;
        image_size = img.shape()[1];
        classes = classes.max(label + 1);
        records.push(Record {
            filename: parts[0].to_string(),
            label,
            split,
        });
        images.push(img);
    }
    if records.is_empty() {
        return Err(Error::Format("index.csv lists no images".into()));
    }
    Ok(Dataset {
        records,
        images,
        classes,
        image_size,
    })
}

/// Write embeddings as a `.ten` matrix plus a CSV row index.
pub fn export_embeddings(
    dir: &Path,
    stem: &str,
    embeddings: &Tensor<f32>,
    records: &[&Record],
) -> Result<()> {
    crate::tensor::ten_io::write_file(&dir.join(format!("{stem}.ten")), embeddings)?;
    let mut csv = String::from("row,filename,label,split\n");
    for (row, r) in records.iter().enumerate() {
        csv.push_str(&format!("{row},{},{},{}\n", r.filename, r.label, r.split));
    }
    let path = dir.join(format!("{stem}.csv"));
    std::fs::write(&path, csv).map_err(|e| Error::io(path.display().to_string(), e))
}
