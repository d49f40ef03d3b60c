//! JSONL annotation files (the canonical format), a KITTI label importer,
//! and PNG image IO.
//!
//! JSONL layout, one frame per line:
//!
//! ```text
//! {"frame_id": "f0", "image_path": "images/f0.png", "camera": {"focal_px": 200.0},
//!  "objects": [{"bbox": [x, y, w, h], "class": "pedestrian", "distance_m": 12.5,
//!               "occlusion": 0.0, "dont_care": false}]}
//! ```
//!
//! `image_path` is resolved relative to the directory holding the JSONL file.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{validate_object, BoundingBox, CameraMeta, FrameSample, ObjectAnnotation};
use crate::error::{io_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationFormat {
    Jsonl,
    KittiLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub bbox: [f64; 4],
    pub class: String,
    pub distance_m: f64,
    pub occlusion: f64,
    pub dont_care: bool,
}

/// A frame's annotations plus the (unresolved) path of its image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: String,
    pub image_path: String,
    pub camera: CameraMeta,
    pub objects: Vec<ObjectRecord>,
}

impl FrameRecord {
    pub fn annotations(&self) -> Vec<ObjectAnnotation> {
        self.objects
            .iter()
            .map(|o| ObjectAnnotation {
                bbox: BoundingBox::new(o.bbox[0], o.bbox[1], o.bbox[2], o.bbox[3]),
                class_label: o.class.clone(),
                distance_m: o.distance_m,
                occlusion: o.occlusion,
                dont_care: o.dont_care,
            })
            .collect()
    }

    fn from_frame(frame: &FrameSample, image_path: String) -> Self {
        Self {
            frame_id: frame.frame_id.clone(),
            image_path,
            camera: frame.camera.clone(),
            objects: frame
                .annotations
                .iter()
                .map(|a| ObjectRecord {
                    bbox: [a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h],
                    class: a.class_label.clone(),
                    distance_m: a.distance_m,
                    occlusion: a.occlusion,
                    dont_care: a.dont_care,
                })
                .collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        for (i, a) in self.annotations().iter().enumerate() {
            validate_object(a).map_err(|m| Error::InvalidAnnotation {
                frame_id: self.frame_id.clone(),
                message: format!("object {i}: {m}"),
            })?;
        }
        Ok(())
    }
}

/// Reads annotation records without touching images.
///
/// For [`AnnotationFormat::KittiLabel`], `path` is either one label file or a
/// directory of `*.txt` label files (read in name order).
pub fn read_records(path: &Path, format: AnnotationFormat) -> Result<Vec<FrameRecord>> {
    match format {
        AnnotationFormat::Jsonl => read_jsonl(path),
        AnnotationFormat::KittiLabel => {
            if path.is_dir() {
                let mut files: Vec<PathBuf> = fs::read_dir(path)
                    .map_err(io_err(path))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|e| e == "txt"))
                    .collect();
                files.sort();
                files.iter().map(|f| read_kitti_file(f)).collect()
            } else {
                Ok(vec![read_kitti_file(path)?])
            }
        }
    }
}

/// Reads annotations and loads every referenced image.
///
/// KITTI images are looked up as `<label_dir>/../image_2/<frame_id>.png`.
pub fn read_annotations(path: &Path, format: AnnotationFormat) -> Result<Vec<FrameSample>> {
    let records = read_records(path, format)?;
    let base = match format {
        AnnotationFormat::Jsonl => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        AnnotationFormat::KittiLabel => PathBuf::new(),
    };
    records
        .into_iter()
        .map(|r| {
            let image_path = match format {
                AnnotationFormat::Jsonl => base.join(&r.image_path),
                AnnotationFormat::KittiLabel => PathBuf::from(&r.image_path),
            };
            let frame = FrameSample {
                image: load_png(&image_path)?,
                annotations: r.annotations(),
                camera: r.camera,
                frame_id: r.frame_id,
            };
            frame.validate()?;
            Ok(frame)
        })
        .collect()
}

fn read_jsonl(path: &Path) -> Result<Vec<FrameRecord>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FrameRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

/// Parses one KITTI devkit label file. Distances come from the location `z`
/// field unless a sidecar `<stem>.dist` file (one distance per object line)
/// sits next to it. The integer occlusion state `0..=3` maps to `state / 3`.
fn read_kitti_file(path: &Path) -> Result<FrameRecord> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let sidecar = path.with_extension("dist");
    let sidecar_dists: Option<Vec<f64>> = if sidecar.exists() {
        let s = fs::read_to_string(&sidecar).map_err(io_err(&sidecar))?;
        let mut v = Vec::new();
        for (i, l) in s.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            v.push(l.trim().parse::<f64>().map_err(|e| Error::Parse {
                path: sidecar.clone(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Some(v)
    } else {
        None
    };
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut objects = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 15 && fields.len() != 16 {
            return Err(parse_err(i + 1, format!("expected 15 fields, found {}", fields.len())));
        }
        let num = |k: usize| -> Result<f64> {
            fields[k]
                .parse::<f64>()
                .map_err(|e| parse_err(i + 1, format!("field {k} ({:?}): {e}", fields[k])))
        };
        let class = fields[0].to_string();
        let occluded = num(2)?;
        let (left, top, right, bottom) = (num(4)?, num(5)?, num(6)?, num(7)?);
        let z = num(13)?;
        if right < left || bottom < top {
            return Err(parse_err(i + 1, "negative box dimensions".into()));
        }
        let distance_m = match &sidecar_dists {
            Some(d) => *d.get(objects.len()).ok_or_else(|| {
                parse_err(i + 1, format!("sidecar {} has too few distances", sidecar.display()))
            })?,
            None => z,
        };
        objects.push(ObjectRecord {
            bbox: [left, top, right - left, bottom - top],
            dont_care: class == "DontCare",
            class,
            distance_m,
            occlusion: (occluded.clamp(0.0, 3.0)) / 3.0,
        });
    }
    let image_path = path
        .parent()
        .and_then(Path::parent)
        .map(|p| p.join("image_2").join(format!("{stem}.png")))
        .unwrap_or_else(|| PathBuf::from(format!("{stem}.png")));
    Ok(FrameRecord {
        frame_id: stem,
        image_path: image_path.to_string_lossy().into_owned(),
        camera: CameraMeta::default(),
        objects,
    })
}

/// Writes `<dir>/<name>` as JSONL plus one PNG per frame under `<dir>/images/`.
pub fn write_annotations(dir: &Path, name: &str, frames: &[FrameSample]) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let path = dir.join(name);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    for frame in frames {
        let rel = format!("images/{}.png", frame.frame_id);
        save_png(&frame.image, &dir.join(&rel))?;
        let line = serde_json::to_string(&FrameRecord::from_frame(frame, rel))?;
        writeln!(w, "{line}").map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(path)
}

/// Loads an 8-bit RGB(A) PNG as a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data))
}

pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| (image.at3(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
