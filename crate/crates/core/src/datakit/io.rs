use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use amieod_autograd::Tensor;
use image::{ImageBuffer, Rgb};
use serde::Deserialize;

use super::{DatasetFormat, DatasetSpec, MissingLabels, Sample, Split};
use crate::error::{Error, Result};
use crate::primitives::{Annotation, BBox, Image};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Reads an 8- or 16-bit RGB(A) file into `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.into_rgb16();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    let t = Tensor::from_fn([3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        raw[p * 3 + c] as f64 / 65535.0
    });
    Image::new(t)
}

/// Writes a 16-bit RGB PNG.
pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let d = image.tensor().data();
    let mut buf = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for c in 0..3 {
            buf.push((d[c * h * w + p] * 65535.0).round() as u16);
        }
    }
    let img: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer sized to the image");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

fn parse_yolo_labels(
    path: &Path,
    text: &str,
    width: usize,
    height: usize,
    num_classes: usize,
) -> Result<Vec<Annotation>> {
    let (w, h) = (width as f64, height as f64);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad class id `{}`", fields[0])))?;
        if class_id >= num_classes {
            return Err(err(format!(
                "class {class_id} not among {num_classes} classes"
            )));
        }
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(format!("bad number `{f}`")))?;
        }
        let bbox = BBox::from_center(v[0] * w, v[1] * h, v[2] * w, v[3] * h)
            .ok()
            .and_then(|b| b.clip(w, h))
            .ok_or_else(|| err("empty box".into()))?;
        out.push(Annotation { bbox, class_id });
    }
    Ok(out)
}

fn load_yolo(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    let split = spec.split.as_str();
    let image_dir = spec.root.join("images").join(split);
    let label_dir = spec.root.join("labels").join(split);
    let mut samples = Vec::new();
    for path in sorted_images(&image_dir)? {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let label_path = label_dir.join(format!("{stem}.txt"));
        if !label_path.exists() {
            match spec.missing_labels {
                MissingLabels::Fail => return Err(Error::MissingLabel(label_path)),
                MissingLabels::Skip => {
                    log::warn!("skipping {} without labels", path.display());
                    continue;
                }
            }
        }
        let image = load_image(&path)?;
        let text = fs::read_to_string(&label_path).map_err(|e| Error::io(&label_path, e))?;
        let annotations = parse_yolo_labels(
            &label_path,
            &text,
            image.width(),
            image.height(),
            spec.class_names.len(),
        )?;
        let clean_path = spec
            .root
            .join("clean")
            .join(split)
            .join(format!("{stem}.png"));
        let clean = if clean_path.exists() {
            Some(load_image(&clean_path)?)
        } else {
            None
        };
        samples.push(Sample {
            clean,
            ..Sample::new(stem, image, annotations)
        });
    }
    Ok(samples)
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    bbox: [f64; 4],
    category_id: u64,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

fn load_coco(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    let split = spec.split.as_str();
    let ann_path = spec
        .root
        .join("annotations")
        .join(format!("instances_{split}.json"));
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let coco: CocoFile = serde_json::from_str(&text)?;
    let parse_err = |message: String| Error::Parse {
        path: ann_path.clone(),
        line: 0,
        message,
    };
    let mut class_of = HashMap::new();
    for cat in &coco.categories {
        let idx = spec
            .class_names
            .iter()
            .position(|n| *n == cat.name)
            .ok_or_else(|| parse_err(format!("category `{}` is not a declared class", cat.name)))?;
        class_of.insert(cat.id, idx);
    }
    let mut by_image: HashMap<u64, Vec<&CocoAnnotation>> = HashMap::new();
    for a in &coco.annotations {
        by_image.entry(a.image_id).or_default().push(a);
    }
    let mut images: Vec<&CocoImage> = coco.images.iter().collect();
    images.sort_by(|a, b| a.file_name.cmp(&b.file_name));
    let image_dir = spec.root.join("images").join(split);
    let mut samples = Vec::new();
    for im in images {
        let image = load_image(&image_dir.join(&im.file_name))?;
        let (w, h) = (image.width() as f64, image.height() as f64);
        let mut annotations = Vec::new();
        for a in by_image.get(&im.id).into_iter().flatten() {
            let class_id = *class_of
                .get(&a.category_id)
                .ok_or_else(|| parse_err(format!("unknown category id {}", a.category_id)))?;
            let [x, y, bw, bh] = a.bbox;
            let bbox = BBox::new(x, y, x + bw, y + bh)
                .ok()
                .and_then(|b| b.clip(w, h))
                .ok_or_else(|| parse_err(format!("empty box in {}", im.file_name)))?;
            annotations.push(Annotation { bbox, class_id });
        }
        let name = Path::new(&im.file_name)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&im.file_name)
            .to_string();
        samples.push(Sample::new(name, image, annotations));
    }
    Ok(samples)
}

/// Loads every image of a split, sorted by file name.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    if !spec.root.is_dir() {
        return Err(Error::invalid(format!(
            "dataset root {} does not exist",
            spec.root.display()
        )));
    }
    if spec.class_names.is_empty() {
        return Err(Error::invalid("dataset declares no classes"));
    }
    match spec.format {
        DatasetFormat::YoloTxt => load_yolo(spec),
        DatasetFormat::CocoJson => load_coco(spec),
    }
}

fn fmt_label(a: &Annotation, w: f64, h: f64) -> String {
    let (cx, cy) = a.bbox.center();
    format!(
        "{} {} {} {} {}\n",
        a.class_id,
        cx / w,
        cy / h,
        a.bbox.width() / w,
        a.bbox.height() / h
    )
}

/// Writes samples in the yolo-txt layout; bright originals, when present,
/// go to `clean/<split>/`.
pub fn save_yolo(root: &Path, split: Split, samples: &[Sample]) -> Result<()> {
    let split = split.as_str();
    let label_dir = root.join("labels").join(split);
    fs::create_dir_all(&label_dir).map_err(|e| Error::io(&label_dir, e))?;
    for s in samples {
        save_image(
            &s.image,
            &root
                .join("images")
                .join(split)
                .join(format!("{}.png", s.name)),
        )?;
        if let Some(clean) = &s.clean {
            save_image(
                clean,
                &root
                    .join("clean")
                    .join(split)
                    .join(format!("{}.png", s.name)),
            )?;
        }
        let (w, h) = (s.image.width() as f64, s.image.height() as f64);
        let text: String = s.annotations.iter().map(|a| fmt_label(a, w, h)).collect();
        let path = label_dir.join(format!("{}.txt", s.name));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(root: &Path) -> DatasetSpec {
        DatasetSpec {
            root: root.to_path_buf(),
            split: Split::Train,
            format: DatasetFormat::YoloTxt,
            class_names: vec!["a".into(), "b".into(), "c".into()],
            missing_labels: MissingLabels::Fail,
        }
    }

    fn write_sample(root: &Path, name: &str, label: Option<&str>) {
        let img = Image::from_fn(100, 100, |c, y, x| ((c + y + x) % 7) as f64 / 6.0).unwrap();
        save_image(&img, &root.join("images/train").join(format!("{name}.png"))).unwrap();
        if let Some(text) = label {
            let dir = root.join("labels/train");
            fs::create_dir_all(&dir).unwrap();
            fs::write(dir.join(format!("{name}.txt")), text).unwrap();
        }
    }

    #[test]
    fn yolo_line_converts_to_corners() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), "b", Some("2 0.5 0.5 0.25 0.25\n"));
        write_sample(dir.path(), "a", Some(""));
        let samples = load_dataset(&spec(dir.path())).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].name, "a");
        assert!(samples[0].annotations.is_empty());
        let ann = samples[1].annotations[0];
        assert_eq!(ann.class_id, 2);
        assert_eq!(ann.bbox, BBox::new(37.5, 37.5, 62.5, 62.5).unwrap());
    }

    #[test]
    fn bad_class_reports_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(
            dir.path(),
            "x",
            Some("0 0.5 0.5 0.1 0.1\n3 0.5 0.5 0.1 0.1\n"),
        );
        match load_dataset(&spec(dir.path())) {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 2);
                assert!(path.ends_with("x.txt"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_label_policy() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), "x", None);
        write_sample(dir.path(), "y", Some(""));
        assert!(matches!(
            load_dataset(&spec(dir.path())),
            Err(Error::MissingLabel(_))
        ));
        let mut s = spec(dir.path());
        s.missing_labels = MissingLabels::Skip;
        let samples = load_dataset(&s).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].name, "y");
    }

    #[test]
    fn png_round_trip_is_exact_on_the_16_bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(33, 40, |c, y, x| {
            ((c * 999 + y * 77 + x * 13) % 65536) as f64 / 65535.0
        })
        .unwrap();
        let p = dir.path().join("i.png");
        save_image(&img, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn coco_subset() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(64, 48, 0.2).unwrap();
        save_image(&img, &dir.path().join("images/test/z.png")).unwrap();
        fs::create_dir_all(dir.path().join("annotations")).unwrap();
        fs::write(
            dir.path().join("annotations/instances_test.json"),
            r#"{"images":[{"id":7,"file_name":"z.png","width":48,"height":64}],
                "annotations":[{"image_id":7,"bbox":[4,5,10,20],"category_id":11}],
                "categories":[{"id":11,"name":"c"}]}"#,
        )
        .unwrap();
        let mut s = spec(dir.path());
        s.split = Split::Test;
        s.format = DatasetFormat::CocoJson;
        let samples = load_dataset(&s).unwrap();
        assert_eq!(samples[0].annotations[0].class_id, 2);
        assert_eq!(
            samples[0].annotations[0].bbox,
            BBox::new(4.0, 5.0, 14.0, 25.0).unwrap()
        );
    }
}
