//! Seeded synthetic benchmark: multi-instance shape scenes with occlusion,
//! ground-truth instance masks and boxes, an initial-proposal sampler and
//! the on-disk dataset layout (PPM images, PGM masks, `index.txt`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{clip_box, BBox};

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Tight pixel box `[x0, x1) × [y0, y1)` around set pixels.
    pub fn tight_box(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x1 > 0).then(|| BBox::from_corners(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }

    pub fn flip_h(&self) -> Self {
        let mut out = Mask::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }
}

/// 8-bit RGB image, interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn flip_h(&self) -> Self {
        let mut out = Image::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    /// Planar `[1, 3, H, W]` tensor with values centered around zero.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut v = vec![0.0; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                let p = self.pixel(x, y);
                for c in 0..3 {
                    v[(c * h + y) * w + x] = p[c] as f64 / 255.0 - 0.5;
                }
            }
        }
        Tensor::new(vec![1, 3, h, w], v).expect("image tensor shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceGT {
    pub id: usize,
    /// 1..=K
    pub class: usize,
    pub mask: Mask,
    pub bbox: BBox,
}

impl InstanceGT {
    /// Instance whose mask fills the pixels with centers inside `bbox`.
    pub fn from_box(id: usize, class: usize, bbox: BBox) -> Self {
        let w = bbox.x1().ceil().max(1.0) as usize;
        let h = bbox.y1().ceil().max(1.0) as usize;
        let mut mask = Mask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if px > bbox.x0() && px < bbox.x1() && py > bbox.y0() && py < bbox.y1() {
                    mask.set(x, y, true);
                }
            }
        }
        InstanceGT { id, class, mask, bbox }
    }

    pub fn flip_h(&self) -> Self {
        InstanceGT {
            id: self.id,
            class: self.class,
            mask: self.mask.flip_h(),
            bbox: self.bbox.flip_h(self.mask.width as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub instances: Vec<InstanceGT>,
}

impl Scene {
    pub fn flip_h(&self) -> Self {
        Scene {
            image: self.image.flip_h(),
            instances: self.instances.iter().map(InstanceGT::flip_h).collect(),
        }
    }
}

pub const CLASS_NAMES: [&str; 3] = ["disk", "triangle", "rectangle"];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub img_w: usize,
    pub img_h: usize,
    pub num_classes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_visible: f64,
    /// Probability that a new shape is placed near an existing one.
    pub overlap_bias: f64,
    pub color_jitter: f64,
    pub noise: f64,
    pub proposals_per_instance: usize,
    pub random_proposals: usize,
    /// Center shift as a fraction of box size (uniform ±).
    pub proposal_shift: f64,
    /// Log-scale size jitter (uniform ±).
    pub proposal_log_scale: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            img_w: 64,
            img_h: 64,
            num_classes: 3,
            min_instances: 1,
            max_instances: 4,
            min_visible: 0.25,
            overlap_bias: 0.5,
            color_jitter: 40.0,
            noise: 12.0,
            proposals_per_instance: 12,
            random_proposals: 16,
            proposal_shift: 0.3,
            proposal_log_scale: 0.4,
            seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.img_w < 16 || self.img_h < 16 {
            return bad("image must be at least 16x16");
        }
        if self.num_classes == 0 || self.num_classes > CLASS_NAMES.len() {
            return bad("num_classes must be in 1..=3");
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return bad("need 1 <= min_instances <= max_instances");
        }
        if !(0.0..1.0).contains(&self.min_visible) {
            return bad("min_visible must be in [0, 1)");
        }
        if self.proposal_shift < 0.0 || self.proposal_log_scale < 0.0 || self.noise < 0.0 || self.color_jitter < 0.0 {
            return bad("jitter and noise magnitudes must be non-negative");
        }
        Ok(())
    }
}

const SCENE_DOMAIN: u64 = 0x5CE7_E000;
const PROPOSAL_DOMAIN: u64 = 0x9B0_9051;
const MAX_ATTEMPTS: usize = 40;
const MIN_SHAPE_AREA: usize = 40;

/// Independent generator for `(seed, domain, index)`.
pub fn substream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Triangle { pts: [(f64, f64); 3] },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    pub fn class(&self) -> usize {
        match self {
            Shape::Disk { .. } => 1,
            Shape::Triangle { .. } => 2,
            Shape::Rect { .. } => 3,
        }
    }

    /// Whether the pixel `(x, y)` (center at `+0.5`) is covered.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            Shape::Disk { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            Shape::Triangle { pts } => {
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                let d = [edge(pts[0], pts[1]), edge(pts[1], pts[2]), edge(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }

    pub fn rasterize(&self, w: usize, h: usize) -> Mask {
        let mut m = Mask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                if self.covers(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }
}

fn sample_shape(rng: &mut ChaCha8Rng, cfg: &SceneConfig, anchor: Option<(f64, f64)>) -> Shape {
    let (w, h) = (cfg.img_w as f64, cfg.img_h as f64);
    let scale = w.min(h) / 64.0;
    let (cx, cy) = match anchor {
        Some((ax, ay)) => (
            (ax + rng.random_range(-14.0..14.0) * scale).clamp(4.0, w - 4.0),
            (ay + rng.random_range(-14.0..14.0) * scale).clamp(4.0, h - 4.0),
        ),
        None => (rng.random_range(8.0 * scale..w - 8.0 * scale), rng.random_range(8.0 * scale..h - 8.0 * scale)),
    };
    match rng.random_range(1..=cfg.num_classes) {
        1 => Shape::Disk {
            cx,
            cy,
            r: rng.random_range(6.0..13.0) * scale,
        },
        2 => {
            let r = rng.random_range(9.0..17.0) * scale;
            let rot = rng.random_range(0.0..std::f64::consts::TAU);
            let pt = |k: f64| {
                let a = rot + k * std::f64::consts::TAU / 3.0;
                (cx + r * a.cos(), cy + r * a.sin())
            };
            Shape::Triangle {
                pts: [pt(0.0), pt(1.0), pt(2.0)],
            }
        }
        _ => {
            let hw = rng.random_range(5.0..15.0) * scale;
            let hh = rng.random_range(5.0..15.0) * scale;
            Shape::Rect {
                x0: cx - hw,
                y0: cy - hh,
                x1: cx + hw,
                y1: cy + hh,
            }
        }
    }
}

fn base_color(class: usize) -> [f64; 3] {
    match class {
        1 => [200.0, 70.0, 60.0],
        2 => [70.0, 190.0, 80.0],
        _ => [70.0, 100.0, 210.0],
    }
}

/// Visible masks of `full` masks drawn back to front.
fn resolve_occlusion(full: &[Mask]) -> Vec<Mask> {
    let mut visible = full.to_vec();
    for i in 0..full.len() {
        for j in i + 1..full.len() {
            for (v, &f) in visible[i].data.iter_mut().zip(&full[j].data) {
                if f != 0 {
                    *v = 0;
                }
            }
        }
    }
    visible
}

/// Deterministic scene `index` for `cfg.seed`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Scene {
    let mut rng = substream(cfg.seed, SCENE_DOMAIN, index);
    let (w, h) = (cfg.img_w, cfg.img_h);
    let target = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let mut shapes: Vec<Shape> = Vec::new();
    let mut full: Vec<Mask> = Vec::new();
    let mut colors: Vec<[u8; 3]> = Vec::new();
    for _ in 0..target {
        for _ in 0..MAX_ATTEMPTS {
            let anchor = if !shapes.is_empty() && rng.random_bool(cfg.overlap_bias) {
                let k = rng.random_range(0..shapes.len());
                full[k].tight_box().map(|b| (b.cx, b.cy))
            } else {
                None
            };
            let s = sample_shape(&mut rng, cfg, anchor);
            let m = s.rasterize(w, h);
            if m.count() < MIN_SHAPE_AREA {
                continue;
            }
            let mut cand = full.clone();
            cand.push(m.clone());
            let vis = resolve_occlusion(&cand);
            let ok = vis
                .iter()
                .zip(&cand)
                .all(|(v, f)| v.count() as f64 >= cfg.min_visible * f.count() as f64 && !v.is_empty());
            if ok {
                let base = base_color(s.class());
                let mut c = [0u8; 3];
                for (ch, b) in c.iter_mut().zip(base) {
                    let j = if cfg.color_jitter > 0.0 {
                        rng.random_range(-cfg.color_jitter..=cfg.color_jitter)
                    } else {
                        0.0
                    };
                    *ch = (b + j).round().clamp(0.0, 255.0) as u8;
                }
                shapes.push(s);
                full.push(m);
                colors.push(c);
                break;
            }
        }
    }
    let visible = resolve_occlusion(&full);
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(20.0..90.0));
    let mut image = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let owner = visible.iter().position(|m| m.get(x, y));
            let mut px = [0u8; 3];
            for c in 0..3 {
                let base = match owner {
                    Some(i) => colors[i][c] as f64,
                    None => bg[c],
                };
                let n = if cfg.noise > 0.0 {
                    rng.random_range(-cfg.noise..=cfg.noise)
                } else {
                    0.0
                };
                px[c] = (base + n).round().clamp(0.0, 255.0) as u8;
            }
            image.set_pixel(x, y, px);
        }
    }
    let instances = shapes
        .iter()
        .zip(visible)
        .enumerate()
        .map(|(id, (s, mask))| InstanceGT {
            id,
            class: s.class(),
            bbox: mask.tight_box().expect("accepted instances are visible"),
            mask,
        })
        .collect();
    Scene { image, instances }
}

/// Jittered copies of every ground-truth box plus uniform random boxes, clipped.
pub fn generate_proposals(gts: &[InstanceGT], cfg: &SceneConfig, index: u64) -> Vec<BBox> {
    let mut rng = substream(cfg.seed, PROPOSAL_DOMAIN, index);
    let (w, h) = (cfg.img_w as f64, cfg.img_h as f64);
    let mut sym = |mag: f64| mag * (2.0 * rng.random::<f64>() - 1.0);
    let mut out = Vec::with_capacity(gts.len() * cfg.proposals_per_instance + cfg.random_proposals);
    for g in gts {
        for _ in 0..cfg.proposals_per_instance {
            let b = BBox::new(
                g.bbox.cx + sym(cfg.proposal_shift) * g.bbox.w,
                g.bbox.cy + sym(cfg.proposal_shift) * g.bbox.h,
                g.bbox.w * sym(cfg.proposal_log_scale).exp(),
                g.bbox.h * sym(cfg.proposal_log_scale).exp(),
            );
            out.push(clip_box(&b, cfg.img_w, cfg.img_h));
        }
    }
    let side = w.min(h);
    for _ in 0..cfg.random_proposals {
        let bw = side * (0.12 + 0.5 * rng.random::<f64>());
        let bh = side * (0.12 + 0.5 * rng.random::<f64>());
        let b = BBox::new(rng.random::<f64>() * w, rng.random::<f64>() * h, bw, bh);
        out.push(clip_box(&b, cfg.img_w, cfg.img_h));
    }
    out
}

// ---------------------------------------------------------------------------
// Dataset layout

/// One line of `index.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub image: String,
    pub instances: Vec<ManifestInstance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestInstance {
    pub class: usize,
    pub bbox: BBox,
    pub mask: String,
}

pub const MANIFEST_NAME: &str = "index.txt";

pub fn format_box(b: &BBox) -> String {
    format!("box({},{},{},{})", b.cx, b.cy, b.w, b.h)
}

pub fn parse_box(s: &str) -> Option<BBox> {
    let inner = s.strip_prefix("box(")?.strip_suffix(')')?;
    let v: Vec<f64> = inner.split(',').map(|t| t.trim().parse().ok()).collect::<Option<_>>()?;
    (v.len() == 4).then(|| BBox::new(v[0], v[1], v[2], v[3]))
}

pub fn format_manifest(records: &[ManifestRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.image);
        for i in &r.instances {
            let _ = write!(s, "\t{}:{}:{}", i.class, format_box(&i.bbox), i.mask);
        }
        s.push('\n');
    }
    s
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let image = fields.next().unwrap_or_default().to_string();
        let mut instances = Vec::new();
        for f in fields {
            let bad = || Error::format(path, format!("line {}: malformed instance field {f:?}", ln + 1));
            let mut parts = f.splitn(3, ':');
            let class = parts.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            let bbox = parts.next().and_then(parse_box).ok_or_else(bad)?;
            let mask = parts.next().filter(|m| !m.is_empty()).ok_or_else(bad)?.to_string();
            instances.push(ManifestInstance { class, bbox, mask });
        }
        out.push(ManifestRecord { image, instances });
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.extend_from_slice(&img.data);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    buf.extend(mask.data.iter().map(|&v| if v != 0 { 255u8 } else { 0 }));
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Parses a binary netpbm header; returns `(width, height, payload offset)`.
fn parse_netpbm(buf: &[u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, usize)> {
    if buf.len() < 2 || &buf[..2] != magic {
        return Err(Error::format(path, format!("expected {} header", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match buf.get(pos) {
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&buf[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed header"))?;
    }
    if fields[2] != 255 {
        return Err(Error::format(path, "only 8-bit maxval 255 is supported"));
    }
    if !buf.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, "malformed header"));
    }
    Ok((fields[0], fields[1], pos + 1))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, off) = parse_netpbm(&buf, b"P6", path)?;
    let need = w * h * 3;
    if buf.len() - off != need {
        return Err(Error::format(path, format!("expected {need} pixel bytes, found {}", buf.len() - off)));
    }
    Ok(Image {
        width: w,
        height: h,
        data: buf[off..].to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, off) = parse_netpbm(&buf, b"P5", path)?;
    if buf.len() - off != w * h {
        return Err(Error::format(path, format!("expected {} pixel bytes, found {}", w * h, buf.len() - off)));
    }
    Ok(Mask {
        width: w,
        height: h,
        data: buf[off..].iter().map(|&v| (v >= 128) as u8).collect(),
    })
}

pub fn image_file_name(index: usize) -> String {
    format!("img_{index:05}.ppm")
}

/// Writes scenes and `index.txt` under `dir` (created if needed).
pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<Vec<ManifestRecord>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let image = image_file_name(i);
        write_ppm(&dir.join(&image), &s.image)?;
        let mut instances = Vec::new();
        for (k, inst) in s.instances.iter().enumerate() {
            let mask = format!("img_{i:05}_m{k}.pgm");
            write_pgm(&dir.join(&mask), &inst.mask)?;
            instances.push(ManifestInstance {
                class: inst.class,
                bbox: inst.bbox,
                mask,
            });
        }
        records.push(ManifestRecord { image, instances });
    }
    let mpath = dir.join(MANIFEST_NAME);
    std::fs::write(&mpath, format_manifest(&records)).map_err(|e| Error::io(&mpath, e))?;
    Ok(records)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let mpath = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    parse_manifest(&text, &mpath)
}

/// Reads every scene listed in `dir/index.txt`.
pub fn read_dataset(dir: &Path) -> Result<(Vec<ManifestRecord>, Vec<Scene>)> {
    let records = read_manifest(dir)?;
    let mut scenes = Vec::with_capacity(records.len());
    for r in &records {
        let image = read_ppm(&dir.join(&r.image))?;
        let mut instances = Vec::with_capacity(r.instances.len());
        for (id, inst) in r.instances.iter().enumerate() {
            let mpath: PathBuf = dir.join(&inst.mask);
            let mask = read_pgm(&mpath)?;
            if (mask.width, mask.height) != (image.width, image.height) {
                return Err(Error::format(&mpath, "mask size differs from its image"));
            }
            instances.push(InstanceGT {
                id,
                class: inst.class,
                mask,
                bbox: inst.bbox,
            });
        }
        scenes.push(Scene { image, instances });
    }
    Ok((records, scenes))
}
