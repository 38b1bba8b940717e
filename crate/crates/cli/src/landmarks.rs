//! Landmark CSV ingestion: `level,name,x_mm,y_mm,z_mm`, one labeled
//! anatomical point per row, levels grouped in file order.

use std::fs;
use std::path::Path;
use thiserror::Error;
use vgan_core::validate::Landmark;

#[derive(Debug, Error)]
pub enum LandmarkError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line 1: expected header `level,name,x_mm,y_mm,z_mm`")]
    BadHeader,
    #[error("line {line}: malformed row (expected 5 comma-separated fields)")]
    MalformedRow { line: usize },
    #[error("line {line}: non-numeric coordinate `{value}`")]
    BadCoordinate { line: usize, value: String },
    #[error("line {line}: empty level label")]
    EmptyLevel { line: usize },
    #[error("no landmarks")]
    NoLandmarks,
}

pub const HEADER: &str = "level,name,x_mm,y_mm,z_mm";

pub fn read_landmarks(path: &Path) -> Result<Vec<Landmark>, LandmarkError> {
    let text = fs::read_to_string(path).map_err(|e| LandmarkError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_landmarks(&text)
}

pub fn parse_landmarks(text: &str) -> Result<Vec<Landmark>, LandmarkError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        _ => return Err(LandmarkError::BadHeader),
    }
    let mut out = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 5 {
            return Err(LandmarkError::MalformedRow { line });
        }
        let level = fields[0].trim();
        if level.is_empty() {
            return Err(LandmarkError::EmptyLevel { line });
        }
        let mut coords = [0.0f64; 3];
        for (c, field) in coords.iter_mut().zip(&fields[2..]) {
            *c = field
                .trim()
                .parse()
                .map_err(|_| LandmarkError::BadCoordinate {
                    line,
                    value: field.trim().to_string(),
                })?;
            if !c.is_finite() {
                return Err(LandmarkError::BadCoordinate {
                    line,
                    value: field.trim().to_string(),
                });
            }
        }
        out.push(Landmark {
            level: level.to_string(),
            name: fields[1].trim().to_string(),
            point: coords,
        });
    }
    if out.is_empty() {
        return Err(LandmarkError::NoLandmarks);
    }
    Ok(out)
}

pub fn write_landmarks(landmarks: &[Landmark], path: &Path) -> Result<(), LandmarkError> {
    let mut out = String::from(HEADER);
    out.push('\n');
    for lm in landmarks {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            lm.level, lm.name, lm.point[0], lm.point[1], lm.point[2]
        ));
    }
    fs::write(path, out).map_err(|e| LandmarkError::Io {
        path: path.display().to_string(),
        source: e,
    })
}
