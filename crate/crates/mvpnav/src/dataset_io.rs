//! Dataset CSV: header `traversal_id,index,pose_x,pose_y,d0,...,d{D-1}`, one
//! row per (traversal, place), rows grouped by traversal in ascending index.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mvpnav_core::math::{self, Point2};
use mvpnav_core::traversal::{Dataset, Place, Traversal, TraversalError, UNIT_NORM_TOLERANCE};
use thiserror::Error;

/// Descriptors this close to unit norm are renormalized on load.
pub const LOAD_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DatasetFileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: {source}")]
    Invalid {
        path: PathBuf,
        source: TraversalError,
    },
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_csv(dataset: &Dataset, out: &mut impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = dataset.descriptor_dim();
    let mut header = vec![
        "traversal_id".to_string(),
        "index".into(),
        "pose_x".into(),
        "pose_y".into(),
    ];
    header.extend((0..d).map(|k| format!("d{k}")));
    w.write_record(&header)?;
    for t in dataset.traversals() {
        for (i, place) in t.places().iter().enumerate() {
            let mut rec = vec![
                t.condition_id().to_string(),
                place.index.to_string(),
                fmt_f64(place.pose.x),
                fmt_f64(place.pose.y),
            ];
            rec.extend(t.descriptor(i).iter().map(|&v| fmt_f64(v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Serializes to memory first, so nothing is written if formatting fails.
pub fn dataset_to_csv(dataset: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(dataset, &mut buf).expect("writing CSV to memory cannot fail");
    buf
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DatasetFileError> {
    // A `Dataset` is validated on construction; re-check so a file is never
    // written for data that would fail to load.
    Dataset::new(dataset.traversals().to_vec()).map_err(|source| DatasetFileError::Invalid {
        path: path.to_path_buf(),
        source,
    })?;
    let bytes = dataset_to_csv(dataset);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| DatasetFileError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| DatasetFileError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Pending {
    id: String,
    places: Vec<Place>,
    descriptors: Vec<Vec<f64>>,
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetFileError> {
    let bytes = fs::read(path).map_err(|source| DatasetFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&bytes, path)
}

pub fn parse_dataset(bytes: &[u8], path: &Path) -> Result<Dataset, DatasetFileError> {
    let parse_err = |line: u64, message: String| DatasetFileError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes);
    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let fixed = ["traversal_id", "index", "pose_x", "pose_y"];
    if header.len() < fixed.len() + 2 || fixed.iter().zip(header.iter()).any(|(a, b)| *a != b) {
        return Err(parse_err(
            1,
            "header must start with traversal_id,index,pose_x,pose_y followed by d0,d1,...".into(),
        ));
    }
    let dim = header.len() - fixed.len();
    for (k, name) in header.iter().skip(fixed.len()).enumerate() {
        if name != format!("d{k}") {
            return Err(parse_err(
                1,
                format!("expected column `d{k}`, found `{name}`"),
            ));
        }
    }

    let mut traversals: Vec<Pending> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let num = |k: usize| -> Result<f64, DatasetFileError> {
            let s = rec[k].trim();
            s.parse::<f64>().map_err(|_| {
                parse_err(
                    line,
                    format!("column `{}`: `{s}` is not a number", &header[k]),
                )
            })
        };
        let id = rec[0].to_string();
        let index: usize = rec[1].trim().parse().map_err(|_| {
            parse_err(
                line,
                format!("column `index`: `{}` is not a place index", &rec[1]),
            )
        })?;
        let pose = Point2::new(num(2)?, num(3)?);
        let mut d = (0..dim)
            .map(|k| num(4 + k))
            .collect::<Result<Vec<f64>, _>>()?;
        if d.iter().any(|v| !v.is_finite()) || !pose.is_finite() {
            return Err(parse_err(line, "non-finite value".into()));
        }
        let n = math::norm(&d);
        if (n - 1.0).abs() > LOAD_NORM_TOLERANCE {
            return Err(parse_err(
                line,
                format!("descriptor norm {n} is not within {LOAD_NORM_TOLERANCE} of 1"),
            ));
        }
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            d.iter_mut().for_each(|v| *v /= n);
        }

        let slot = match traversals.iter().position(|t| t.id == id) {
            Some(p) if p + 1 == traversals.len() => p,
            Some(_) => {
                return Err(parse_err(
                    line,
                    format!("rows of traversal `{id}` are not contiguous"),
                ))
            }
            None => {
                traversals.push(Pending {
                    id: id.clone(),
                    places: Vec::new(),
                    descriptors: Vec::new(),
                });
                traversals.len() - 1
            }
        };
        let t = &mut traversals[slot];
        if index != t.places.len() {
            return Err(parse_err(
                line,
                format!(
                    "traversal `{id}`: expected place index {}, found {index}",
                    t.places.len()
                ),
            ));
        }
        t.places.push(Place { index, pose });
        t.descriptors.push(d);
    }
    let invalid = |source| DatasetFileError::Invalid {
        path: path.to_path_buf(),
        source,
    };
    let built = traversals
        .into_iter()
        .map(|p| Traversal::new(p.id, p.places, p.descriptors))
        .collect::<Result<Vec<_>, _>>()
        .map_err(invalid)?;
    Dataset::new(built).map_err(invalid)
}
