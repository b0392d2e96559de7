//! Synthetic "shapes" dataset with a fixed class palette, map recovery by
//! nearest palette color, and the evaluation metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::SemanticMap;
use crate::error::{Error, Result};
use crate::pnm::{self, Raster};

pub const MAX_CLASSES: usize = 8;

/// Reference colors; class 0 is the background.
pub const DEFAULT_PALETTE: [[f64; 3]; MAX_CLASSES] = [
    [0.1, 0.1, 0.1],
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.2],
    [0.2, 0.3, 0.9],
    [0.9, 0.9, 0.2],
    [0.9, 0.3, 0.9],
    [0.2, 0.9, 0.9],
    [0.95, 0.95, 0.95],
];

pub const MIN_SEPARATION: f64 = 0.3;

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    colors: Vec<[f64; 3]>,
}

impl Palette {
    pub fn new(colors: Vec<[f64; 3]>) -> Result<Self> {
        if colors.len() < 2 {
            return Err(Error::Config("palette needs at least two classes".into()));
        }
        if colors.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("palette colors must lie in [0, 1]".into()));
        }
        let p = Palette { colors };
        if p.min_separation() < MIN_SEPARATION {
            return Err(Error::Config(format!(
                "palette colors are only {:.3} apart, need {MIN_SEPARATION}",
                p.min_separation()
            )));
        }
        Ok(p)
    }

    /// The first `classes` default colors.
    pub fn default_for(classes: usize) -> Result<Self> {
        if classes > MAX_CLASSES {
            return Err(Error::Config(format!("at most {MAX_CLASSES} classes are available")));
        }
        Palette::new(DEFAULT_PALETTE[..classes].to_vec())
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn color(&self, class: u16) -> [f64; 3] {
        self.colors[class as usize]
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.colors.len() {
            for j in i + 1..self.colors.len() {
                best = best.min(dist2(&self.colors[i], &self.colors[j]).sqrt());
            }
        }
        best
    }

    /// Nearest color in L2, ties to the lower id.
    pub fn nearest(&self, rgb: [f64; 3]) -> u16 {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (i, c) in self.colors.iter().enumerate() {
            let d = dist2(c, &rgb);
            if d < bd {
                bd = d;
                best = i;
            }
        }
        best as u16
    }
}

/// Planar RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// `3 x height x width`.
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Input(format!("RGB image {height}x{width} needs {} values", 3 * height * width)));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn pixel(&self, p: usize) -> [f64; 3] {
        let hw = self.height * self.width;
        [self.data[p], self.data[hw + p], self.data[2 * hw + p]]
    }

    /// Map `[-1, 1]` model output to `[0, 1]`, clamping.
    pub fn from_model_range(height: usize, width: usize, values: &[f32]) -> Result<Self> {
        RgbImage::new(height, width, values.iter().map(|&v| ((v as f64 + 1.0) / 2.0).clamp(0.0, 1.0)).collect())
    }

    pub fn to_model_range(&self) -> Vec<f32> {
        self.data.iter().map(|&v| (2.0 * v - 1.0) as f32).collect()
    }

    pub fn to_raster(&self) -> Raster {
        let hw = self.height * self.width;
        let mut data = Vec::with_capacity(3 * hw);
        for p in 0..hw {
            for c in 0..3 {
                data.push((self.data[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Raster { width: self.width, height: self.height, channels: 3, data }
    }

    pub fn from_raster(r: &Raster) -> Result<Self> {
        if r.channels != 3 {
            return Err(Error::Format("expected a color pixmap".into()));
        }
        let hw = r.width * r.height;
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[c * hw + p] = r.data[3 * p + c] as f64 / 255.0;
            }
        }
        RgbImage::new(r.height, r.width, data)
    }
}

pub fn map_to_raster(map: &SemanticMap) -> Raster {
    Raster {
        width: map.width(),
        height: map.height(),
        channels: 1,
        data: map.classes().iter().map(|&c| c as u8).collect(),
    }
}

pub fn map_from_raster(r: &Raster) -> Result<SemanticMap> {
    if r.channels != 1 {
        return Err(Error::Format("expected a graymap".into()));
    }
    SemanticMap::new(r.height, r.width, r.data.iter().map(|&v| v as u16).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesSpec {
    pub size: usize,
    pub palette: Palette,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub texture: f64,
    pub seed: u64,
}

impl ShapesSpec {
    pub fn new(size: usize, classes: usize, seed: u64) -> Result<Self> {
        Ok(ShapesSpec { size, palette: Palette::default_for(classes)?, min_shapes: 1, max_shapes: 4, texture: 0.05, seed })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub map: SemanticMap,
}

/// Sample `index` of the stream defined by `spec`. Each index has its own
/// RNG stream, so samples do not depend on how many are generated.
pub fn generate_one(spec: &ShapesSpec, index: u64) -> Sample {
    let s = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let mut classes = vec![0u16; s * s];
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    for _ in 0..count {
        let class = rng.gen_range(1..spec.palette.len()) as u16;
        let lo = (s / 6).max(2);
        let hi = (s / 2).max(lo + 1);
        if rng.gen_bool(0.5) {
            let (h, w) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
            let (y0, x0) = (rng.gen_range(0..=s - h), rng.gen_range(0..=s - w));
            for y in y0..y0 + h {
                classes[y * s + x0..y * s + x0 + w].iter_mut().for_each(|c| *c = class);
            }
        } else {
            let r = rng.gen_range(lo as f64 / 2.0..hi as f64 / 2.0);
            let (cy, cx) = (rng.gen_range(0.0..s as f64), rng.gen_range(0.0..s as f64));
            for y in 0..s {
                for x in 0..s {
                    if (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2) <= r * r {
                        classes[y * s + x] = class;
                    }
                }
            }
        }
    }
    let (fy, fx, phase): (f64, f64, f64) = (rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0), rng.gen_range(0.0..6.3));
    let hw = s * s;
    let mut data = vec![0.0; 3 * hw];
    for p in 0..hw {
        let (y, x) = ((p / s) as f64, (p % s) as f64);
        let wave = (std::f64::consts::TAU * (fy * y + fx * x) / s as f64 + phase).sin();
        let color = spec.palette.color(classes[p]);
        for c in 0..3 {
            data[c * hw + p] = (color[c] + spec.texture * wave).clamp(0.0, 1.0);
        }
    }
    Sample {
        image: RgbImage { height: s, width: s, data },
        map: SemanticMap::new(s, s, classes).expect("consistent size"),
    }
}

/// Samples `start .. start + n` of the stream.
pub fn generate_shapes(spec: &ShapesSpec, start: u64, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Input("need at least one sample".into()));
    }
    if spec.min_shapes > spec.max_shapes {
        return Err(Error::Config("min_shapes exceeds max_shapes".into()));
    }
    Ok((0..n as u64).into_par_iter().map(|i| generate_one(spec, start + i)).collect())
}

/// Nearest palette color per pixel.
pub fn recover_map(image: &RgbImage, palette: &Palette) -> SemanticMap {
    let classes = (0..image.height * image.width).map(|p| palette.nearest(image.pixel(p))).collect();
    SemanticMap::new(image.height, image.width, classes).expect("consistent size")
}

/// Mean IoU over classes present in either map.
pub fn miou(pred: &SemanticMap, reference: &SemanticMap) -> Result<f64> {
    if (pred.height(), pred.width()) != (reference.height(), reference.width()) {
        return Err(Error::Input(format!(
            "maps differ in size: {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            reference.height(),
            reference.width()
        )));
    }
    let k = pred.classes().iter().chain(reference.classes()).copied().max().unwrap_or(0) as usize + 1;
    let mut inter = vec![0usize; k];
    let mut pc = vec![0usize; k];
    let mut rc = vec![0usize; k];
    for (&a, &b) in pred.classes().iter().zip(reference.classes()) {
        pc[a as usize] += 1;
        rc[b as usize] += 1;
        if a == b {
            inter[a as usize] += 1;
        }
    }
    let mut sum = 0.0;
    let mut count = 0;
    for c in 0..k {
        let union = pc[c] + rc[c] - inter[c];
        if union > 0 {
            sum += inter[c] as f64 / union as f64;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelMetrics {
    pub mse: f64,
    /// Infinite for identical images.
    pub psnr: f64,
}

pub fn pixel_metrics(a: &[f64], b: &[f64]) -> Result<PixelMetrics> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Input(format!("images differ in size: {} vs {}", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() };
    Ok(PixelMetrics { mse, psnr })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub palette: Palette,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Offset of the held-out stream inside the generator.
pub const TEST_STREAM_OFFSET: u64 = 1 << 32;

pub fn generate_dataset(spec: &ShapesSpec, train: usize, test: usize) -> Result<Dataset> {
    Ok(Dataset {
        palette: spec.palette.clone(),
        train: generate_shapes(spec, 0, train)?,
        test: generate_shapes(spec, TEST_STREAM_OFFSET, test)?,
    })
}

/// Write images, maps and `manifest.txt` under `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let mut manifest = String::from("# shapes dataset\n");
    for (i, c) in ds.palette.colors().iter().enumerate() {
        let _ = writeln!(manifest, "palette {i} {} {} {}", c[0], c[1], c[2]);
    }
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        let sub = dir.join(split);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (i, s) in samples.iter().enumerate() {
            let (img, map) = (format!("{split}/{i:05}.ppm"), format!("{split}/{i:05}.pgm"));
            pnm::write(&dir.join(&img), &s.image.to_raster())?;
            pnm::write(&dir.join(&map), &map_to_raster(&s.map))?;
            let _ = writeln!(manifest, "pair {split} {img} {map}");
        }
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut colors = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("{}:{}: cannot parse `{line}`", path.display(), no + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["palette", id, r, g, b] => {
                let id: usize = id.parse().map_err(|_| bad())?;
                if id != colors.len() {
                    return Err(bad());
                }
                let c = [r, g, b].map(|v| v.parse::<f64>());
                match c {
                    [Ok(r), Ok(g), Ok(b)] => colors.push([r, g, b]),
                    _ => return Err(bad()),
                }
            }
            ["pair", split, img, map] => {
                let image = RgbImage::from_raster(&pnm::read(&dir.join(img))?)?;
                let map = map_from_raster(&pnm::read(&dir.join(map))?)?;
                if (image.height, image.width) != (map.height(), map.width()) {
                    return Err(Error::Format(format!("{img} and its map differ in size")));
                }
                let s = Sample { image, map };
                match *split {
                    "train" => train.push(s),
                    "test" => test.push(s),
                    _ => return Err(bad()),
                }
            }
            _ => return Err(bad()),
        }
    }
    let palette = Palette::new(colors).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for s in train.iter().chain(&test) {
        s.map.validate(palette.len())?;
    }
    if train.is_empty() {
        return Err(Error::Format(format!("{}: no training pairs", path.display())));
    }
    Ok(Dataset { palette, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ShapesSpec {
        ShapesSpec::new(32, 6, 3).unwrap()
    }

    #[test]
    fn default_palette_is_well_separated() {
        let p = Palette::default_for(MAX_CLASSES).unwrap();
        assert!(p.min_separation() >= MIN_SEPARATION);
        assert!(Palette::new(vec![[0.0; 3], [0.1, 0.1, 0.1]]).is_err());
    }

    #[test]
    fn zero_texture_gives_exact_palette_pixels() {
        let mut sp = spec();
        sp.texture = 0.0;
        for s in generate_shapes(&sp, 0, 5).unwrap() {
            for p in 0..32 * 32 {
                assert_eq!(s.image.pixel(p), sp.palette.color(s.map.classes()[p]));
            }
        }
    }

    #[test]
    fn recovery_closes_the_loop() {
        for s in generate_shapes(&spec(), 0, 20).unwrap() {
            let rec = recover_map(&s.image, &spec().palette);
            assert_eq!(rec, s.map);
            assert_eq!(miou(&rec, &s.map).unwrap(), 1.0);
        }
    }

    #[test]
    fn generation_is_deterministic_and_index_addressed() {
        let a = generate_shapes(&spec(), 0, 6).unwrap();
        let b = generate_shapes(&spec(), 0, 6).unwrap();
        assert_eq!(a, b);
        let tail = generate_shapes(&spec(), 3, 3).unwrap();
        assert_eq!(&a[3..], &tail[..]);
        assert!(a.iter().any(|s| s.map.distinct().len() > 1));
    }

    #[test]
    fn recovery_is_robust_inside_half_separation() {
        let p = Palette::default_for(6).unwrap();
        let half = p.min_separation() / 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2000 {
            let class = rng.gen_range(0..6u16);
            let c = p.color(class);
            // random direction scaled just inside the radius
            let d: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let n = dist2(&d, &[0.0; 3]).sqrt().max(1e-9);
            let r = half * (1.0 - 1e-9);
            let px = [c[0] + d[0] / n * r, c[1] + d[1] / n * r, c[2] + d[2] / n * r];
            assert_eq!(p.nearest(px), class);
        }
        // just past the midpoint of the closest pair flips the label
        let (mut i0, mut j0, mut best) = (0, 0, f64::INFINITY);
        for i in 0..6 {
            for j in i + 1..6 {
                let d = dist2(&p.colors()[i], &p.colors()[j]).sqrt();
                if d < best {
                    (i0, j0, best) = (i, j, d);
                }
            }
        }
        let (a, b) = (p.colors()[i0], p.colors()[j0]);
        let at = |f: f64| [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]), a[2] + f * (b[2] - a[2])];
        assert_eq!(p.nearest(at(0.5 - 1e-6)) as usize, i0);
        assert_eq!(p.nearest(at(0.5 + 1e-6)) as usize, j0);
    }

    #[test]
    fn uniform_noise_below_half_separation_recovers_exactly() {
        let sp = ShapesSpec { texture: 0.0, ..spec() };
        let amp = sp.palette.min_separation() / 2.0 / 3f64.sqrt() * 0.999;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mut s in generate_shapes(&sp, 0, 5).unwrap() {
            s.image.data.iter_mut().for_each(|v| *v += rng.gen_range(-amp..amp));
            assert_eq!(recover_map(&s.image, &sp.palette), s.map);
        }
    }

    #[test]
    fn ties_go_to_lower_id() {
        let p = Palette::new(vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]).unwrap();
        let img = RgbImage::new(1, 2, vec![0.5; 6]).unwrap();
        assert_eq!(recover_map(&img, &p).classes(), &[0, 0]);
    }

    #[test]
    fn miou_examples() {
        let a = SemanticMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(miou(&a, &a).unwrap(), 1.0);
        let swapped = SemanticMap::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(miou(&swapped, &a).unwrap(), 0.0);
        let other = SemanticMap::new(1, 4, vec![0; 4]).unwrap();
        assert!(matches!(miou(&a, &other), Err(Error::Input(_))));
    }

    #[test]
    fn miou_half_wrong_matches_set_count_oracle() {
        // reference: left half class 0, right half class 1 on 4x4
        let r: Vec<u16> = (0..16).map(|p| u16::from(p % 4 >= 2)).collect();
        // prediction correct on top half, class 1 everywhere on the bottom
        let pr: Vec<u16> = (0..16).map(|p| if p < 8 { r[p] } else { 1 }).collect();
        let (rm, pm) = (SemanticMap::new(4, 4, r.clone()).unwrap(), SemanticMap::new(4, 4, pr.clone()).unwrap());
        let mut ious = Vec::new();
        for c in 0..2u16 {
            let a: std::collections::BTreeSet<usize> = (0..16).filter(|&p| pr[p] == c).collect();
            let b: std::collections::BTreeSet<usize> = (0..16).filter(|&p| r[p] == c).collect();
            ious.push(a.intersection(&b).count() as f64 / a.union(&b).count() as f64);
        }
        let expect = ious.iter().sum::<f64>() / 2.0;
        assert!((miou(&pm, &rm).unwrap() - expect).abs() < 1e-15);
        assert!((miou(&rm, &pm).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn miou_ignores_classes_absent_from_both() {
        let a = SemanticMap::new(1, 2, vec![0, 5]).unwrap();
        assert_eq!(miou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn pixel_metric_examples() {
        let a = vec![0.2; 12];
        let m = pixel_metrics(&a, &a).unwrap();
        assert_eq!(m.mse, 0.0);
        assert!(m.psnr.is_infinite());
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        let m = pixel_metrics(&a, &b).unwrap();
        assert!((m.mse - 0.01).abs() < 1e-12);
        assert!((m.psnr - 20.0).abs() < 1e-9);
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&ShapesSpec { texture: 0.0, ..spec() }, 3, 2).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.palette, ds.palette);
        assert_eq!(back.train.len(), 3);
        for (a, b) in back.train.iter().chain(&back.test).zip(ds.train.iter().chain(&ds.test)) {
            assert_eq!(a.map, b.map);
            assert!(a.image.data.iter().zip(&b.image.data).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
        }
        let again = tempfile::tempdir().unwrap();
        write_dataset(again.path(), &ds).unwrap();
        assert_eq!(
            fs::read(dir.path().join("manifest.txt")).unwrap(),
            fs::read(again.path().join("manifest.txt")).unwrap()
        );
        assert_eq!(
            fs::read(dir.path().join("train/00001.ppm")).unwrap(),
            fs::read(again.path().join("train/00001.ppm")).unwrap()
        );
    }
}
