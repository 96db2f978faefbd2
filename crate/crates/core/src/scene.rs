//! Synthetic icon-detection scenes: icons of random class and size pasted at
//! random positions on a white canvas, with detector-format labels.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage, Rgba, RgbaImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::types::BBox;

/// Rejection-sampling budget per icon before it is skipped.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone)]
pub struct IconLibrary {
    classes: Vec<String>,
    icons: Vec<Vec<RgbaImage>>,
}

impl IconLibrary {
    pub fn new(classes: Vec<(String, Vec<RgbaImage>)>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::invalid("icon library", "no classes"));
        }
        let mut names = Vec::with_capacity(classes.len());
        let mut icons = Vec::with_capacity(classes.len());
        for (name, imgs) in classes {
            if imgs.is_empty() {
                return Err(Error::invalid(
                    "icon library",
                    format!("class `{name}` has no icons"),
                ));
            }
            if imgs.iter().any(|i| i.width() == 0 || i.height() == 0) {
                return Err(Error::invalid(
                    "icon library",
                    format!("class `{name}` has an empty icon"),
                ));
            }
            names.push(name);
            icons.push(imgs);
        }
        Ok(Self {
            classes: names,
            icons,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.classes
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn icons(&self, class_id: usize) -> &[RgbaImage] {
        &self.icons[class_id]
    }

    /// The named classes, in the order given.
    pub fn subset<S: AsRef<str>>(&self, names: &[S]) -> Result<Self> {
        let classes = names
            .iter()
            .map(|n| {
                let n = n.as_ref();
                let id = self
                    .class_id(n)
                    .ok_or_else(|| Error::invalid("icon library", format!("no class `{n}`")))?;
                Ok((n.to_string(), self.icons[id].clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(classes)
    }

    /// A small built-in library of flat geometric glyphs, for tests and demos
    /// when no real icon set is at hand. `variants` recolorings per class.
    pub fn procedural(variants: usize) -> Self {
        let variants = variants.max(1);
        let palette = [
            [200u8, 30, 30],
            [30, 120, 200],
            [30, 150, 60],
            [120, 60, 160],
            [210, 130, 20],
            [40, 40, 40],
        ];
        let shapes: [(&str, u32, u32); 8] = [
            ("bar", 48, 20),
            ("circle", 48, 48),
            ("cross", 48, 48),
            ("diamond", 48, 48),
            ("pillar", 20, 48),
            ("ring", 48, 48),
            ("square", 48, 48),
            ("triangle", 48, 48),
        ];
        let classes = shapes
            .iter()
            .map(|&(name, w, h)| {
                let imgs = (0..variants)
                    .map(|v| {
                        let c = palette[v % palette.len()];
                        draw_glyph(name, w, h, Rgba([c[0], c[1], c[2], 255]))
                    })
                    .collect();
                (name.to_string(), imgs)
            })
            .collect();
        Self::new(classes).expect("procedural library is valid")
    }

    /// Writes the library as `<dir>/<class>/<k>.png`, the layout read by
    /// [`load_icon_library`].
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        for (name, imgs) in self.classes.iter().zip(&self.icons) {
            let class_dir = dir.join(name);
            std::fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
            for (k, img) in imgs.iter().enumerate() {
                let path = class_dir.join(format!("{k}.png"));
                img.save(&path).map_err(|e| Error::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
            }
        }
        Ok(())
    }
}

fn draw_glyph(shape: &str, w: u32, h: u32, color: Rgba<u8>) -> RgbaImage {
    let mut img = RgbaImage::from_pixel(w, h, Rgba([0, 0, 0, 0]));
    let (fw, fh) = (w as f64, h as f64);
    for y in 0..h {
        for x in 0..w {
            // pixel-center coordinates normalized to [-1, 1]
            let u = (x as f64 + 0.5) / fw * 2.0 - 1.0;
            let v = (y as f64 + 0.5) / fh * 2.0 - 1.0;
            let r2 = u * u + v * v;
            let inside = match shape {
                "circle" => r2 <= 0.9,
                "ring" => (0.35..=0.9).contains(&r2),
                "square" | "bar" | "pillar" => u.abs() <= 0.9 && v.abs() <= 0.9,
                "diamond" => u.abs() + v.abs() <= 0.95,
                "cross" => u.abs() <= 0.3 || v.abs() <= 0.3,
                "triangle" => (-0.9..=0.9).contains(&v) && u.abs() <= (v + 0.9) / 1.8 * 0.95,
                _ => true,
            };
            if inside {
                img.put_pixel(x, y, color);
            }
        }
    }
    img
}

/// Loads `<dir>/<class>/*.png`. Classes are sorted by directory name and
/// numbered from 0; icons within a class are sorted by file name.
pub fn load_icon_library(dir: &Path) -> Result<IconLibrary> {
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::invalid(
            "icon library",
            format!("{} contains no class directories", dir.display()),
        ));
    }

    let mut classes = Vec::with_capacity(class_dirs.len());
    for class_dir in class_dirs {
        let name = class_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&class_dir)
            .map_err(|e| Error::io(&class_dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        let mut imgs = Vec::with_capacity(files.len());
        for path in files {
            let img = image::open(&path).map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
            imgs.push(img.to_rgba8());
        }
        classes.push((name, imgs));
    }
    IconLibrary::new(classes)
}

/// Recipe for one family of scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub n_min: usize,
    pub n_max: usize,
    /// Longest icon side, inclusive range in pixels.
    pub size_min: u32,
    pub size_max: u32,
    /// Maximum IoU allowed between any two placed boxes.
    pub max_iou: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 480,
            height: 480,
            n_min: 1,
            n_max: 8,
            size_min: 32,
            size_max: 128,
            max_iou: 0.1,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid("scene spec", m));
        if self.width == 0 || self.height == 0 {
            return fail("canvas must be non-empty".into());
        }
        if self.n_min > self.n_max {
            return fail(format!("n_min {} > n_max {}", self.n_min, self.n_max));
        }
        if self.size_min < 8 {
            return fail(format!("size_min {} < 8", self.size_min));
        }
        if self.size_min > self.size_max {
            return fail(format!("size_min {} > size_max {}", self.size_min, self.size_max));
        }
        if self.size_max > self.width.min(self.height) {
            return fail(format!(
                "size_max {} exceeds the smaller canvas side {}",
                self.size_max,
                self.width.min(self.height)
            ));
        }
        if !(0.0..=1.0).contains(&self.max_iou) {
            return fail(format!("max_iou {} outside [0, 1]", self.max_iou));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: RgbImage,
    /// In placement order.
    pub annotations: Vec<Annotation>,
    pub skipped: usize,
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix1 = a.x1().max(b.x1());
    let iy1 = a.y1().max(b.y1());
    let ix2 = a.x2().min(b.x2());
    let iy2 = a.y2().min(b.y2());
    if ix1 >= ix2 || iy1 >= iy2 {
        return 0.0;
    }
    let inter = (ix2 - ix1) as u64 * (iy2 - iy1) as u64;
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Nearest-neighbor resize so the longest side equals `longest`, preserving
/// aspect ratio. Integer sampling keeps the result platform-exact.
pub fn resize_nearest(src: &RgbaImage, longest: u32) -> RgbaImage {
    let (w, h) = (src.width() as u64, src.height() as u64);
    let l = longest as u64;
    let (nw, nh) = if w >= h {
        (l, ((h * l + w / 2) / w).max(1))
    } else {
        (((w * l + h / 2) / h).max(1), l)
    };
    RgbaImage::from_fn(nw as u32, nh as u32, |x, y| {
        let sx = (x as u64 * w / nw) as u32;
        let sy = (y as u64 * h / nh) as u32;
        *src.get_pixel(sx, sy)
    })
}

/// Source-over blend of a straight-alpha icon onto an opaque canvas.
fn paste(canvas: &mut RgbImage, icon: &RgbaImage, x0: u32, y0: u32) {
    for (x, y, px) in icon.enumerate_pixels() {
        let a = px[3] as u32;
        if a == 0 {
            continue;
        }
        let dst = canvas.get_pixel_mut(x0 + x, y0 + y);
        let mut out = [0u8; 3];
        for c in 0..3 {
            out[c] = ((px[c] as u32 * a + dst[c] as u32 * (255 - a) + 127) / 255) as u8;
        }
        *dst = Rgb(out);
    }
}

/// Renders one scene. Draw order per icon: class, variant, size, then up to
/// [`MAX_PLACEMENT_ATTEMPTS`] positions; an icon that never fits under the
/// overlap threshold is skipped and counted.
pub fn compose_scene(spec: &SceneSpec, lib: &IconLibrary, rng: &mut Rng) -> Result<Scene> {
    spec.validate()?;
    let mut image = RgbImage::from_pixel(spec.width, spec.height, Rgb([255, 255, 255]));
    let n = rng.range_inclusive(spec.n_min, spec.n_max);
    let mut annotations: Vec<Annotation> = Vec::with_capacity(n);
    let mut skipped = 0;

    for _ in 0..n {
        let class_id = rng.below(lib.num_classes());
        let variants = lib.icons(class_id);
        let icon = &variants[rng.below(variants.len())];
        let size = rng.range_inclusive(spec.size_min as usize, spec.size_max as usize) as u32;
        let icon = resize_nearest(icon, size);
        let (w, h) = (icon.width(), icon.height());

        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let x1 = rng.range_inclusive(0, (spec.width - w) as usize) as u32;
            let y1 = rng.range_inclusive(0, (spec.height - h) as usize) as u32;
            let bbox = BBox::new(x1, y1, x1 + w, y1 + h)?;
            if annotations.iter().all(|a| iou(&a.bbox, &bbox) <= spec.max_iou) {
                placed = Some(bbox);
                break;
            }
        }
        match placed {
            Some(bbox) => {
                paste(&mut image, &icon, bbox.x1(), bbox.y1());
                annotations.push(Annotation { class_id, bbox });
            }
            None => skipped += 1,
        }
    }

    Ok(Scene {
        image,
        annotations,
        skipped,
    })
}

/// Detector training labels: `class cx cy w h`, normalized, 6 decimals.
pub fn format_labels(annotations: &[Annotation], canvas_w: u32, canvas_h: u32) -> String {
    let (cw, ch) = (canvas_w as f64, canvas_h as f64);
    let mut out = String::new();
    for a in annotations {
        let b = &a.bbox;
        let cx = (b.x1() + b.x2()) as f64 / 2.0 / cw;
        let cy = (b.y1() + b.y2()) as f64 / 2.0 / ch;
        let w = b.width() as f64 / cw;
        let h = b.height() as f64 / ch;
        writeln!(out, "{} {cx:.6} {cy:.6} {w:.6} {h:.6}", a.class_id).unwrap();
    }
    out
}

pub fn write_label_file(annotations: &[Annotation], canvas_w: u32, canvas_h: u32, path: &Path) -> Result<()> {
    std::fs::write(path, format_labels(annotations, canvas_w, canvas_h)).map_err(|e| Error::io(path, e))
}

/// Inverse of one label line: `(class_id, [x1, y1, x2, y2])` in fractional
/// pixels.
pub fn parse_label_line(line: &str, canvas_w: u32, canvas_h: u32) -> Result<(usize, [f64; 4])> {
    let bad = || Error::invalid("label line", format!("`{line}`"));
    let mut parts = line.split_whitespace();
    let class_id: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let mut vals = [0.0f64; 4];
    for v in vals.iter_mut() {
        *v = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    }
    if parts.next().is_some() {
        return Err(bad());
    }
    let [cx, cy, w, h] = vals;
    let (cw, ch) = (canvas_w as f64, canvas_h as f64);
    Ok((
        class_id,
        [
            (cx - w / 2.0) * cw,
            (cy - h / 2.0) * ch,
            (cx + w / 2.0) * cw,
            (cy + h / 2.0) * ch,
        ],
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub image: String,
    pub label: String,
    pub n_annotations: usize,
    pub n_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub master_seed: u64,
    pub classes: Vec<String>,
    pub scenes: Vec<IndexEntry>,
    pub total_annotations: usize,
    pub total_skipped: usize,
}

pub const INDEX_FILE: &str = "index.json";

fn scene_stem(i: usize) -> String {
    format!("scene_{i:06}")
}

/// Generates `count` scenes into `out_dir`. Scene `i` is seeded with
/// `derive_seed(master_seed, i)`, so output does not depend on `jobs`
/// (0 means one thread per core).
pub fn synth_dataset(
    count: usize,
    spec: &SceneSpec,
    lib: &IconLibrary,
    master_seed: u64,
    out_dir: &Path,
    jobs: usize,
) -> Result<DatasetIndex> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let render = |i: usize| -> Result<IndexEntry> {
        let mut rng = Rng::new(derive_seed(master_seed, i as u64));
        let scene = compose_scene(spec, lib, &mut rng)?;
        let stem = scene_stem(i);
        let image = format!("{stem}.png");
        let label = format!("{stem}.txt");
        let image_path = out_dir.join(&image);
        scene.image.save(&image_path).map_err(|e| Error::Image {
            path: image_path.clone(),
            message: e.to_string(),
        })?;
        write_label_file(&scene.annotations, spec.width, spec.height, &out_dir.join(&label))?;
        Ok(IndexEntry {
            image,
            label,
            n_annotations: scene.annotations.len(),
            n_skipped: scene.skipped,
        })
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid("jobs", e.to_string()))?;
    let scenes: Vec<IndexEntry> =
        pool.install(|| (0..count).into_par_iter().map(render).collect::<Result<_>>())?;

    let index = DatasetIndex {
        master_seed,
        classes: lib.class_names().to_vec(),
        total_annotations: scenes.iter().map(|s| s.n_annotations).sum(),
        total_skipped: scenes.iter().map(|s| s.n_skipped).sum(),
        scenes,
    };
    let index_path = out_dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(&index_path, json + "\n").map_err(|e| Error::io(&index_path, e))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x1: u32, y1: u32, x2: u32, y2: u32) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bb(0, 0, 10, 10), &bb(0, 0, 10, 10)), 1.0);
        assert_eq!(iou(&bb(0, 0, 10, 10), &bb(20, 20, 30, 30)), 0.0);
        assert!((iou(&bb(0, 0, 10, 10), &bb(5, 0, 15, 10)) - 50.0 / 150.0).abs() < 1e-15);
        // touching edges share no area
        assert_eq!(iou(&bb(0, 0, 10, 10), &bb(10, 0, 20, 10)), 0.0);
    }

    #[test]
    fn label_line_example() {
        let a = Annotation {
            class_id: 3,
            bbox: bb(10, 20, 60, 120),
        };
        assert_eq!(
            format_labels(&[a], 480, 480),
            "3 0.072917 0.145833 0.104167 0.208333\n"
        );
        let full = Annotation {
            class_id: 0,
            bbox: bb(0, 0, 480, 480),
        };
        assert_eq!(
            format_labels(&[full], 480, 480),
            "0 0.500000 0.500000 1.000000 1.000000\n"
        );
        assert_eq!(format_labels(&[], 480, 480), "");
    }

    #[test]
    fn zero_icons_gives_white_canvas() {
        let spec = SceneSpec {
            n_min: 0,
            n_max: 0,
            ..SceneSpec::default()
        };
        let lib = IconLibrary::procedural(1);
        let scene = compose_scene(&spec, &lib, &mut Rng::new(1)).unwrap();
        assert!(scene.annotations.is_empty());
        assert!(scene.image.pixels().all(|p| *p == Rgb([255, 255, 255])));
    }

    #[test]
    fn resize_preserves_aspect() {
        let icon = RgbaImage::new(48, 20);
        let r = resize_nearest(&icon, 24);
        assert_eq!((r.width(), r.height()), (24, 10));
        let r = resize_nearest(&RgbaImage::new(20, 48), 96);
        assert_eq!((r.width(), r.height()), (40, 96));
    }

    #[test]
    fn spec_validation() {
        let ok = SceneSpec::default();
        assert!(ok.validate().is_ok());
        assert!(SceneSpec {
            size_min: 4,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SceneSpec {
            size_max: 500,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SceneSpec {
            max_iou: 1.5,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SceneSpec { n_min: 9, ..ok }.validate().is_err());
    }

    #[test]
    fn five_icons_respect_overlap_threshold() {
        let spec = SceneSpec {
            n_min: 5,
            n_max: 5,
            max_iou: 0.1,
            ..SceneSpec::default()
        };
        let lib = IconLibrary::procedural(2);
        for seed in 0..20 {
            let scene = compose_scene(&spec, &lib, &mut Rng::new(seed)).unwrap();
            assert_eq!(scene.annotations.len() + scene.skipped, 5);
            if scene.skipped == 0 {
                assert_eq!(scene.annotations.len(), 5);
            }
            for (i, a) in scene.annotations.iter().enumerate() {
                assert!(a.bbox.fits_in(spec.width, spec.height));
                for b in &scene.annotations[i + 1..] {
                    assert!(iou(&a.bbox, &b.bbox) <= 0.1);
                }
            }
        }
    }

    #[test]
    fn icons_leave_ink_inside_their_box_only() {
        let spec = SceneSpec {
            n_min: 3,
            n_max: 3,
            max_iou: 0.0,
            ..SceneSpec::default()
        };
        let lib = IconLibrary::procedural(1);
        let scene = compose_scene(&spec, &lib, &mut Rng::new(5)).unwrap();
        for (x, y, p) in scene.image.enumerate_pixels() {
            if *p != Rgb([255, 255, 255]) {
                assert!(scene
                    .annotations
                    .iter()
                    .any(|a| { x >= a.bbox.x1() && x < a.bbox.x2() && y >= a.bbox.y1() && y < a.bbox.y2() }));
            }
        }
    }

    #[test]
    fn parse_label_line_inverts_format() {
        let a = Annotation {
            class_id: 7,
            bbox: bb(13, 77, 141, 99),
        };
        let text = format_labels(&[a], 480, 360);
        let (c, b) = parse_label_line(text.trim_end(), 480, 360).unwrap();
        assert_eq!(c, 7);
        for (got, want) in b.iter().zip(a.bbox.coords()) {
            assert!((got - want as f64).abs() <= 0.5);
        }
        assert!(parse_label_line("1 0.5 0.5", 10, 10).is_err());
    }
}
