//! MNIST in IDX format.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use thiserror::Error;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const CLASSES: usize = 10;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("{images} holds {n_images} images but {labels} holds {n_labels} labels")]
    CountMismatch {
        images: PathBuf,
        labels: PathBuf,
        n_images: usize,
        n_labels: usize,
    },
    #[error("MNIST file {0} not found (set the data directory or a mirror to fetch from)")]
    Missing(PathBuf),
    #[error("fetching {url} failed: {reason}")]
    Fetch { url: String, reason: String },
}

/// One split: row-major 28×28 byte images and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Keeps the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.images.truncate(n * PIXELS);
        }
    }

    /// Images of `indices` scaled to `[0, 1]`, flattened row-major.
    pub fn pixels(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            out.extend(self.images[i * PIXELS..(i + 1) * PIXELS].iter().map(|&b| b as f64 / 255.0));
        }
        out
    }

    pub fn labels_f64(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| self.labels[i] as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MnistDataset {
    pub train: Split,
    pub test: Split,
}

/// Reads the four IDX files from `dir`. Each may also be stored gzipped
/// with a `.gz` suffix.
pub fn load_mnist(dir: &Path) -> Result<MnistDataset, DataError> {
    Ok(MnistDataset {
        train: load_split(dir, TRAIN_IMAGES, TRAIN_LABELS)?,
        test: load_split(dir, TEST_IMAGES, TEST_LABELS)?,
    })
}

fn load_split(dir: &Path, images: &str, labels: &str) -> Result<Split, DataError> {
    let (ipath, ibytes) = read_maybe_gz(dir, images)?;
    let (lpath, lbytes) = read_maybe_gz(dir, labels)?;
    let images = parse_images(&ibytes, &ipath)?;
    let labels = parse_labels(&lbytes, &lpath)?;
    if images.len() / PIXELS != labels.len() {
        return Err(DataError::CountMismatch {
            images: ipath,
            labels: lpath,
            n_images: images.len() / PIXELS,
            n_labels: labels.len(),
        });
    }
    Ok(Split { images, labels })
}

fn read_maybe_gz(dir: &Path, name: &str) -> Result<(PathBuf, Vec<u8>), DataError> {
    let plain = dir.join(name);
    if plain.exists() {
        let bytes = fs::read(&plain).map_err(|source| DataError::Io {
            path: plain.clone(),
            source,
        })?;
        return Ok((plain, bytes));
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        let file = fs::File::open(&gz).map_err(|source| DataError::Io {
            path: gz.clone(),
            source,
        })?;
        let mut bytes = Vec::new();
        GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|source| DataError::Io {
                path: gz.clone(),
                source,
            })?;
        return Ok((gz, bytes));
    }
    Err(DataError::Missing(plain))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Format {
            path: path.to_path_buf(),
            offset,
            reason: "truncated header".into(),
        })
}

/// Parses an image file, returning `n·28·28` pixel bytes.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<Vec<u8>, DataError> {
    let fmt = |offset, reason: String| DataError::Format {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(fmt(0, format!("magic {magic}, expected {IMAGE_MAGIC}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    if rows != SIDE || cols != SIDE {
        return Err(fmt(8, format!("images are {rows}×{cols}, expected {SIDE}×{SIDE}")));
    }
    let body = &bytes[16..];
    let need = n * PIXELS;
    if body.len() < need {
        return Err(fmt(
            16 + body.len(),
            format!("truncated: {n} images need {need} bytes, found {}", body.len()),
        ));
    }
    Ok(body[..need].to_vec())
}

/// Parses a label file; every label must be a digit.
pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>, DataError> {
    let fmt = |offset, reason: String| DataError::Format {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(fmt(0, format!("magic {magic}, expected {LABEL_MAGIC}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(fmt(
            8 + body.len(),
            format!("truncated: {n} labels, found {}", body.len()),
        ));
    }
    if let Some(i) = body[..n].iter().position(|&l| l as usize >= CLASSES) {
        return Err(fmt(8 + i, format!("label {} is not a digit", body[i])));
    }
    Ok(body[..n].to_vec())
}

/// Downloads `<mirror>/<name>.gz` for every file missing from `dir`.
pub fn fetch_missing(dir: &Path, mirror: &str) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for name in [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS] {
        if dir.join(name).exists() || dir.join(format!("{name}.gz")).exists() {
            continue;
        }
        let url = format!("{}/{name}.gz", mirror.trim_end_matches('/'));
        let fetch_err = |reason: String| DataError::Fetch {
            url: url.clone(),
            reason,
        };
        let resp = ureq::get(&url).call().map_err(|e| fetch_err(e.to_string()))?;
        let mut bytes = Vec::new();
        resp.into_reader()
            .read_to_end(&mut bytes)
            .map_err(|e| fetch_err(e.to_string()))?;
        let target = dir.join(format!("{name}.gz"));
        fs::write(&target, bytes).map_err(|source| DataError::Io { path: target, source })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend(d.to_be_bytes());
        }
        v
    }

    #[test]
    fn image_header_accepted() {
        let mut bytes = header(IMAGE_MAGIC, &[2, 28, 28]);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        bytes.extend(vec![7u8; 2 * PIXELS]);
        let px = parse_images(&bytes, Path::new("img")).unwrap();
        assert_eq!(px.len(), 2 * PIXELS);
    }

    #[test]
    fn label_file_accepted_and_range_checked() {
        let mut bytes = header(LABEL_MAGIC, &[3]);
        bytes.extend([0, 9, 4]);
        assert_eq!(parse_labels(&bytes, Path::new("lbl")).unwrap(), vec![0, 9, 4]);
        bytes[10] = 10;
        let err = parse_labels(&bytes, Path::new("lbl")).unwrap_err();
        assert!(matches!(err, DataError::Format { offset: 10, .. }), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation() {
        let bytes = header(LABEL_MAGIC, &[1, 28, 28]);
        let err = parse_images(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, DataError::Format { offset: 0, .. }));
        let mut bytes = header(IMAGE_MAGIC, &[2, 28, 28]);
        bytes.extend(vec![0u8; PIXELS]);
        let err = parse_images(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("truncated"));
        let err = parse_images(&[0, 0], Path::new("x")).unwrap_err();
        assert!(matches!(err, DataError::Format { offset: 0, .. }));
        let err = parse_images(&header(IMAGE_MAGIC, &[1, 27, 28]), Path::new("x")).unwrap_err();
        assert!(matches!(err, DataError::Format { offset: 8, .. }));
    }
}
