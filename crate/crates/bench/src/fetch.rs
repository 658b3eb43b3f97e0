//! Obtaining the MNIST IDX files.

use std::fs::{self, File};
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use thiserror::Error;

use crate::data::{TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};

pub const DEFAULT_MIRROR: &str = "https://storage.googleapis.com/cvdf-datasets/mnist/";
pub const FILES: [&str; 4] = [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS];

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{url}: {reason}")]
    Download { url: String, reason: String },
    #[error("{dir} holds neither {name} nor {name}.gz")]
    MissingLocal { dir: PathBuf, name: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FetchError + '_ {
    move |source| FetchError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Where the files come from: a URL prefix, or a local directory holding
/// the raw or gzipped files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    Url(String),
    Local(PathBuf),
}

impl Source {
    pub fn parse(s: &str) -> Self {
        if s.starts_with("http://") || s.starts_with("https://") {
            let mut url = s.to_string();
            if !url.ends_with('/') {
                url.push('/');
            }
            Source::Url(url)
        } else {
            Source::Local(s.into())
        }
    }
}

fn write_all(dest: &Path, mut reader: impl Read, gzipped: bool) -> Result<(), FetchError> {
    let partial = dest.with_extension("partial");
    let mut out = File::create(&partial).map_err(io_err(&partial))?;
    let copied = if gzipped {
        io::copy(&mut GzDecoder::new(reader), &mut out)
    } else {
        io::copy(&mut reader, &mut out)
    };
    copied.map_err(io_err(&partial))?;
    fs::rename(&partial, dest).map_err(io_err(dest))
}

/// Places the four uncompressed IDX files in `dir`, skipping any already
/// present. Returns the names that were written.
pub fn mnist_fetch(dir: &Path, source: &Source) -> Result<Vec<&'static str>, FetchError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for name in FILES {
        let dest = dir.join(name);
        if dest.exists() {
            continue;
        }
        match source {
            Source::Local(src) => {
                let raw = src.join(name);
                let gz = src.join(format!("{name}.gz"));
                if raw.exists() {
                    write_all(&dest, File::open(&raw).map_err(io_err(&raw))?, false)?;
                } else if gz.exists() {
                    write_all(&dest, File::open(&gz).map_err(io_err(&gz))?, true)?;
                } else {
                    return Err(FetchError::MissingLocal {
                        dir: src.clone(),
                        name: name.into(),
                    });
                }
            }
            Source::Url(base) => {
                let url = format!("{base}{name}.gz");
                let response = ureq::get(&url).call().map_err(|e| FetchError::Download {
                    url: url.clone(),
                    reason: e.to_string(),
                })?;
                write_all(&dest, response.into_reader(), true)?;
            }
        }
        written.push(name);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    #[test]
    fn local_source_copies_and_decompresses() {
        let src = tempfile::tempdir().unwrap();
        let dest = tempfile::tempdir().unwrap();
        for (i, name) in FILES.iter().enumerate() {
            let body = vec![i as u8; 10];
            if i % 2 == 0 {
                fs::write(src.path().join(name), &body).unwrap();
            } else {
                let mut enc = GzEncoder::new(Vec::new(), Compression::default());
                enc.write_all(&body).unwrap();
                fs::write(src.path().join(format!("{name}.gz")), enc.finish().unwrap()).unwrap();
            }
        }
        let source = Source::Local(src.path().into());
        assert_eq!(mnist_fetch(dest.path(), &source).unwrap(), FILES.to_vec());
        for (i, name) in FILES.iter().enumerate() {
            assert_eq!(fs::read(dest.path().join(name)).unwrap(), vec![i as u8; 10]);
        }
        assert!(mnist_fetch(dest.path(), &source).unwrap().is_empty());
    }

    #[test]
    fn missing_local_file_is_reported() {
        let src = tempfile::tempdir().unwrap();
        let dest = tempfile::tempdir().unwrap();
        let err = mnist_fetch(dest.path(), &Source::Local(src.path().into())).unwrap_err();
        assert!(matches!(err, FetchError::MissingLocal { .. }));
    }

    #[test]
    fn source_parsing() {
        assert_eq!(
            Source::parse("https://host/mnist"),
            Source::Url("https://host/mnist/".into())
        );
        assert_eq!(Source::parse("/data/raw"), Source::Local("/data/raw".into()));
    }
}
