//! Content-addressed snapshot files.

use std::fs;
use std::io::{self, Cursor};
use std::path::{Path, PathBuf};

use image::ImageReader;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredImage {
    pub hash: String,
    pub content_type: String,
    pub width: u32,
    pub height: u32,
    pub byte_len: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("empty image")]
    Empty,
    #[error("unrecognized image format")]
    UnknownFormat,
    #[error("cannot read image dimensions: {0}")]
    Decode(String),
    #[error("image has zero width or height")]
    ZeroSize,
    #[error("stored bytes do not match hash {0}")]
    HashMismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Format and dimensions from the image header; the pixels are not decoded.
pub fn probe(bytes: &[u8]) -> Result<(String, u32, u32), ImageError> {
    if bytes.is_empty() {
        return Err(ImageError::Empty);
    }
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| ImageError::Decode(e.to_string()))?;
    let Some(format) = reader.format() else {
        return Err(ImageError::UnknownFormat);
    };
    let (w, h) = reader
        .into_dimensions()
        .map_err(|e| ImageError::Decode(e.to_string()))?;
    if w == 0 || h == 0 {
        return Err(ImageError::ZeroSize);
    }
    Ok((format.to_mime_type().to_owned(), w, h))
}

#[derive(Debug, Clone)]
pub struct ImageStore {
    dir: PathBuf,
}

impl ImageStore {
    pub fn open(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_owned(),
        })
    }

    fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(hash)
    }

    /// Validates and stores `bytes` under their hash. Storing the same bytes
    /// twice is a no-op.
    pub fn put(&self, bytes: &[u8]) -> Result<StoredImage, ImageError> {
        let (content_type, width, height) = probe(bytes)?;
        let hash = sha256_hex(bytes);
        let path = self.path(&hash);
        if !path.exists() {
            let tmp = self.dir.join(format!(".{hash}.tmp"));
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(StoredImage {
            hash,
            content_type,
            width,
            height,
            byte_len: bytes.len() as u64,
        })
    }

    /// Reads back a stored image, checking it still matches its hash.
    pub fn get(&self, hash: &str) -> Result<Vec<u8>, ImageError> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(ImageError::Io(io::Error::new(io::ErrorKind::NotFound, "bad image id")));
        }
        let bytes = fs::read(self.path(hash))?;
        if sha256_hex(&bytes) != hash {
            return Err(ImageError::HashMismatch(hash.to_owned()));
        }
        Ok(bytes)
    }
}
