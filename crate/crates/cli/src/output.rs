//! Output directory lock, versioned CSV files and PPM scatter plots.

use std::fs::{File, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use cfm_core::nd::NumArray;

use crate::error::CliError;

pub const LOCK_NAME: &str = ".cfm-lab.lock";
/// Bumped whenever a CSV layout changes.
pub const CSV_VERSION: u32 = 1;

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::Runtime(format!(
                "{} is locked by another writer (remove {} if no run is active)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Opens `path`, writes the `# cfm-lab <kind> v<N>` line and the header.
pub fn csv_writer(path: &Path, kind: &str, header: &[&str]) -> Result<csv::Writer<File>, CliError> {
    let mut file = File::create(path)?;
    writeln!(file, "# cfm-lab {kind} v{CSV_VERSION}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    w.flush()?;
    Ok(w)
}

pub fn float(v: f64) -> String {
    format!("{v}")
}

pub const PPM_SIZE: usize = 512;

/// 512×512 binary PPM: 3×3 black squares on white, axes spanning the data
/// bounds padded by 10% on each side.
pub fn scatter_ppm(points: &NumArray) -> Result<Vec<u8>, CliError> {
    if points.rows() > 0 && points.cols() != 2 {
        return Err(CliError::Usage(format!(
            "scatter plots need 2-D points, got {} columns",
            points.cols()
        )));
    }
    let mut image = vec![255u8; PPM_SIZE * PPM_SIZE * 3];
    let bounds = |axis: usize| {
        let (lo, hi) = points
            .iter_rows()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), r| {
                (l.min(r[axis]), h.max(r[axis]))
            });
        let span = if hi > lo { hi - lo } else { 1.0 };
        (lo - 0.1 * span, hi + 0.1 * span)
    };
    if points.rows() > 0 {
        let (x0, x1) = bounds(0);
        let (y0, y1) = bounds(1);
        let last = (PPM_SIZE - 1) as f64;
        for r in points.iter_rows() {
            if !r[0].is_finite() || !r[1].is_finite() {
                continue;
            }
            let col = ((r[0] - x0) / (x1 - x0) * last).round() as i64;
            let row = ((y1 - r[1]) / (y1 - y0) * last).round() as i64;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (pr, pc) = (row + dr, col + dc);
                    if (0..PPM_SIZE as i64).contains(&pr) && (0..PPM_SIZE as i64).contains(&pc) {
                        let at = (pr as usize * PPM_SIZE + pc as usize) * 3;
                        image[at..at + 3].fill(0);
                    }
                }
            }
        }
    }
    let mut out = format!("P6\n{PPM_SIZE} {PPM_SIZE}\n255\n").into_bytes();
    out.extend(image);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        assert!(OutputLock::acquire(dir.path()).is_err());
        drop(lock);
        OutputLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn csv_has_version_line_then_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let mut w = csv_writer(&path, "test", &["a", "b"]).unwrap();
        w.write_record([float(0.1), float(2.0)]).unwrap();
        drop(w);
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "# cfm-lab test v1\na,b\n0.1,2\n"
        );
    }

    #[test]
    fn ppm_header_and_pixels() {
        let pts = NumArray::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        let img = scatter_ppm(&pts).unwrap();
        let header = b"P6\n512 512\n255\n";
        assert_eq!(&img[..header.len()], header);
        let px = &img[header.len()..];
        assert_eq!(px.len(), 512 * 512 * 3);
        let black = px.chunks(3).filter(|p| p == &[0, 0, 0]).count();
        assert_eq!(black, 18);
        // (0, 0) maps to column 43, row 468 with the 10% padding.
        let at = (468 * 512 + 43) * 3;
        assert_eq!(&px[at..at + 3], &[0, 0, 0]);
    }

    #[test]
    fn ppm_rejects_non_planar_points() {
        assert!(scatter_ppm(&NumArray::from_rows(&[[0.0, 0.0, 0.0]]).unwrap()).is_err());
        assert_eq!(
            scatter_ppm(&NumArray::zeros(&[0, 2])).unwrap().len(),
            15 + 512 * 512 * 3
        );
    }
}
