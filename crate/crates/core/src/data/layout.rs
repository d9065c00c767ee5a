use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, GazeSample, GeometryMeta, Provenance};
use crate::error::{Error, Result};
use crate::geometry::GazeAngles;
use crate::image::{ImageU8, MIN_PIPELINE_SIDE};

const LABEL_HEADER: [&str; 3] = ["filename", "pitch_rad", "yaw_rad"];

#[derive(Serialize, Deserialize)]
struct GeometryLine {
    filename: String,
    geometry: GeometryMeta,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn read_labels(subject: &str, path: &Path) -> Result<BTreeMap<String, GazeAngles<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::load(path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::load(path, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != LABEL_HEADER {
        return Err(Error::load(path, format!("expected header `{}`", LABEL_HEADER.join(","))));
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::load(path, format!("subject {subject}, line {line}: {e}"))
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |msg: String| Error::load(path, format!("subject {subject}, line {line}: {msg}"));
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", rec.len())));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|_| bad(format!("cannot parse {} value `{}`", LABEL_HEADER[i], &rec[i])))
        };
        let gaze = GazeAngles::new(num(1)?, num(2)?).map_err(|e| bad(e.to_string()))?;
        if out.insert(rec[0].to_string(), gaze).is_some() {
            return Err(bad(format!("duplicate label for `{}`", &rec[0])));
        }
    }
    Ok(out)
}

fn read_geometry(path: &Path) -> Result<BTreeMap<String, GeometryMeta>> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let g: GeometryLine =
            serde_json::from_str(&line).map_err(|e| Error::load(path, format!("line {}: {e}", i + 1)))?;
        out.insert(g.filename, g.geometry);
    }
    Ok(out)
}

/// Loads a dataset stored in the per-subject layout described in the module docs.
pub fn load_mpii_layout(root: &Path) -> Result<Dataset> {
    let subjects_dir = root.join("subjects");
    let entries = std::fs::read_dir(&subjects_dir).map_err(|e| Error::load(&subjects_dir, e.to_string()))?;
    let mut subject_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subject_dirs.sort();
    if subject_dirs.is_empty() {
        return Err(Error::load(&subjects_dir, "no subject directories"));
    }

    let mut samples = Vec::new();
    let mut size: Option<(PathBuf, usize)> = None;
    for dir in subject_dirs {
        let subject = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let labels_path = dir.join("labels.csv");
        let mut labels = read_labels(&subject, &labels_path)?;
        let geometry = read_geometry(&dir.join("geometry.jsonl"))?;
        let img_dir = dir.join("images");
        let mut files: Vec<PathBuf> = std::fs::read_dir(&img_dir)
            .map_err(|e| Error::load(&img_dir, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort();
        for path in files {
            let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let gaze = labels
                .remove(&name)
                .ok_or_else(|| Error::load(&path, format!("no label row in {}", labels_path.display())))?;
            let (w, h) = image::image_dimensions(&path).map_err(|e| Error::load(&path, e.to_string()))?;
            let (w, h) = (w as usize, h as usize);
            if w != h || w < MIN_PIPELINE_SIDE {
                return Err(Error::load(&path, format!("images must be square and at least {MIN_PIPELINE_SIDE}px, got {w}x{h}")));
            }
            match &size {
                None => size = Some((path.clone(), w)),
                Some((first, s)) if *s != w => {
                    return Err(Error::load(&path, format!("image is {w}px but {} is {s}px", first.display())));
                }
                _ => {}
            }
            samples.push(GazeSample {
                geometry: geometry.get(&name).cloned(),
                image_path: path,
                gaze,
                subject_id: subject.clone(),
                provenance: Provenance::Original,
            });
        }
        if let Some(name) = labels.keys().next() {
            return Err(Error::load(img_dir.join(name), format!("labelled in {} but missing", labels_path.display())));
        }
    }
    let (_, image_size) = size.ok_or_else(|| Error::load(root, "dataset contains no images"))?;
    Dataset::new(root, image_size, samples)
}

struct SubjectRows {
    labels: Vec<(String, GazeAngles<f64>)>,
    geometry: Vec<GeometryLine>,
}

/// Streams samples into the on-disk layout; [`LayoutWriter::finish`] writes labels and sidecars.
pub struct LayoutWriter {
    root: PathBuf,
    subjects: BTreeMap<String, SubjectRows>,
    names: BTreeSet<(String, String)>,
}

impl LayoutWriter {
    pub fn new(root: &Path) -> Self {
        LayoutWriter { root: root.to_path_buf(), subjects: BTreeMap::new(), names: BTreeSet::new() }
    }

    /// Writes the image as PNG and returns its path.
    pub fn add(
        &mut self,
        subject: &str,
        file_name: &str,
        image: &ImageU8,
        gaze: GazeAngles<f64>,
        geometry: Option<&GeometryMeta>,
    ) -> Result<PathBuf> {
        if !self.names.insert((subject.to_string(), file_name.to_string())) {
            return Err(Error::domain(format!("duplicate sample {subject}/{file_name}")));
        }
        let path = self.root.join("subjects").join(subject).join("images").join(file_name);
        image.save_png(&path)?;
        let rows = self
            .subjects
            .entry(subject.to_string())
            .or_insert_with(|| SubjectRows { labels: Vec::new(), geometry: Vec::new() });
        rows.labels.push((file_name.to_string(), gaze));
        if let Some(g) = geometry {
            rows.geometry.push(GeometryLine { filename: file_name.to_string(), geometry: g.clone() });
        }
        Ok(path)
    }

    pub fn finish(self) -> Result<()> {
        for (subject, rows) in self.subjects {
            let dir = self.root.join("subjects").join(&subject);
            let mut w = csv::Writer::from_path(dir.join("labels.csv")).map_err(|e| Error::load(&dir, e.to_string()))?;
            w.write_record(LABEL_HEADER).map_err(|e| Error::load(&dir, e.to_string()))?;
            for (name, g) in &rows.labels {
                // `{:?}` on f64 prints the shortest round-tripping representation.
                w.write_record([name.clone(), format!("{:?}", g.pitch), format!("{:?}", g.yaw)])
                    .map_err(|e| Error::load(&dir, e.to_string()))?;
            }
            w.flush()?;
            if !rows.geometry.is_empty() {
                let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("geometry.jsonl"))?);
                for g in &rows.geometry {
                    serde_json::to_writer(&mut f, g)?;
                    f.write_all(b"\n")?;
                }
                f.flush()?;
            }
        }
        Ok(())
    }
}

/// Writes every sample with its image into a fresh layout at `root`.
pub fn write_layout(root: &Path, samples: &[(GazeSample, ImageU8)]) -> Result<()> {
    let mut w = LayoutWriter::new(root);
    for (s, img) in samples {
        w.add(&s.subject_id, &s.file_name(), img, s.gaze, s.geometry.as_ref())?;
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(subject: &str, name: &str, pitch: f64) -> (GazeSample, ImageU8) {
        (
            GazeSample {
                image_path: PathBuf::from(name),
                gaze: GazeAngles { pitch, yaw: -0.25 },
                subject_id: subject.into(),
                geometry: None,
                provenance: Provenance::Original,
            },
            ImageU8::filled(8, 8, 3, 40).unwrap(),
        )
    }

    #[test]
    fn round_trip_through_disk() {
        let d = tempfile::tempdir().unwrap();
        let items = vec![sample("p01", "b.png", 0.1), sample("p00", "a.png", 0.2), sample("p00", "c.png", 0.3)];
        write_layout(d.path(), &items).unwrap();
        let ds = load_mpii_layout(d.path()).unwrap();
        assert_eq!(ds.image_size, 8);
        let got: Vec<(String, String, f64)> =
            ds.samples.iter().map(|s| (s.subject_id.clone(), s.file_name(), s.gaze.pitch)).collect();
        assert_eq!(
            got,
            vec![("p00".into(), "a.png".into(), 0.2), ("p00".into(), "c.png".into(), 0.3), ("p01".into(), "b.png".into(), 0.1)]
        );
    }

    #[test]
    fn missing_label_names_the_file() {
        let d = tempfile::tempdir().unwrap();
        write_layout(d.path(), &[sample("p00", "a.png", 0.2)]).unwrap();
        ImageU8::filled(8, 8, 3, 0).unwrap().save_png(&d.path().join("subjects/p00/images/zz.png")).unwrap();
        let err = load_mpii_layout(d.path()).unwrap_err().to_string();
        assert!(err.contains("zz.png"), "{err}");
    }

    #[test]
    fn corrupt_label_names_subject_and_line() {
        let d = tempfile::tempdir().unwrap();
        write_layout(d.path(), &[sample("p07", "a.png", 0.2), sample("p07", "b.png", 0.1)]).unwrap();
        let lp = d.path().join("subjects/p07/labels.csv");
        std::fs::write(&lp, "filename,pitch_rad,yaw_rad\na.png,0.1,0.2\nb.png,oops,0.2\n").unwrap();
        let err = load_mpii_layout(d.path()).unwrap_err().to_string();
        assert!(err.contains("p07") && err.contains("line 3"), "{err}");
    }

    #[test]
    fn mixed_sizes_and_empty_roots_fail() {
        let d = tempfile::tempdir().unwrap();
        assert!(load_mpii_layout(d.path()).is_err());
        write_layout(d.path(), &[sample("p00", "a.png", 0.2), sample("p00", "b.png", 0.1)]).unwrap();
        ImageU8::filled(9, 9, 3, 0).unwrap().save_png(&d.path().join("subjects/p00/images/b.png")).unwrap();
        assert!(load_mpii_layout(d.path()).is_err());
    }
}
