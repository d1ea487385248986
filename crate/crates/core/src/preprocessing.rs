//! CT intensity windowing, contrast-limited adaptive histogram
//! equalisation, and synthetic liver/lesion phantoms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;
use crate::tensor::{Scalar, Tensor};

/// Row-major grayscale image. Pixels hold Hounsfield units before
/// windowing and values in `[0, 1]` after.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Invalid(format!(
                "image {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn is_normalized(&self) -> bool {
        self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            [1, 1, self.height, self.width],
            self.pixels.iter().map(|&v| T::lit(v)).collect(),
        )
        .expect("image dims")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowParams {
    pub center: f64,
    pub width: f64,
}

impl Default for WindowParams {
    /// Abdominal soft-tissue / liver preset.
    fn default() -> Self {
        Self {
            center: 40.0,
            width: 400.0,
        }
    }
}

impl WindowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::config(
                "window_width",
                format!("must be positive and finite, got {}", self.width),
            ));
        }
        if !self.center.is_finite() {
            return Err(Error::config("window_center", "must be finite"));
        }
        Ok(())
    }
}

/// Maps `[center - width/2, center + width/2]` linearly onto `[0, 1]`,
/// clamping outside.
pub fn ct_window(img: &GrayImage, p: &WindowParams) -> Result<GrayImage> {
    p.validate()?;
    let low = p.center - p.width / 2.0;
    let pixels = img
        .pixels
        .iter()
        .map(|&v| ((v - low) / p.width).clamp(0.0, 1.0))
        .collect();
    GrayImage::new(img.width, img.height, pixels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaheParams {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Multiple of the uniform bin height `pixels_per_tile / bins`.
    pub clip_limit: f64,
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            tiles_x: 4,
            tiles_y: 4,
            clip_limit: 2.0,
            bins: 256,
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<()> {
        if self.tiles_x == 0 || self.tiles_y == 0 {
            return Err(Error::config("clahe_tiles", "must be at least 1"));
        }
        if !(self.clip_limit > 0.0) {
            return Err(Error::config("clahe_clip", "must be positive"));
        }
        if self.bins == 0 {
            return Err(Error::config("clahe_bins", "must be at least 1"));
        }
        Ok(())
    }
}

/// Mirror index into `[0, len)` without repeating the edge sample.
fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

#[inline]
fn bin_of(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Intensity mapping of one tile.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum TileMap {
    /// Every pixel fell into one bin.
    Identity,
    Table(Vec<f64>),
}

impl TileMap {
    #[inline]
    pub(crate) fn apply(&self, v: f64, bins: usize) -> f64 {
        match self {
            TileMap::Identity => v,
            TileMap::Table(t) => t[bin_of(v, bins)],
        }
    }
}

pub(crate) fn tile_map(values: impl Iterator<Item = f64>, bins: usize, clip_limit: f64) -> TileMap {
    let mut hist = vec![0u64; bins];
    let mut n = 0u64;
    for v in values {
        hist[bin_of(v, bins)] += 1;
        n += 1;
    }
    if hist.iter().filter(|&&h| h > 0).count() <= 1 {
        return TileMap::Identity;
    }
    let n = n as f64;
    let limit = clip_limit * n / bins as f64;
    let excess: f64 = hist.iter().map(|&h| (h as f64 - limit).max(0.0)).sum();
    let share = excess / bins as f64;
    let clipped: Vec<f64> = hist.iter().map(|&h| (h as f64).min(limit) + share).collect();
    let mut cdf = Vec::with_capacity(bins);
    let mut acc = 0.0;
    for &h in &clipped {
        acc += h;
        cdf.push(acc);
    }
    let first = clipped.iter().position(|&h| h > 0.0).unwrap_or(0);
    let cdf_min = cdf[first];
    TileMap::Table(
        cdf.iter()
            .map(|&c| ((c - cdf_min) / (n - cdf_min)).clamp(0.0, 1.0))
            .collect(),
    )
}

/// Exact when both ends agree.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if a == b {
        a
    } else {
        (1.0 - t) * a + t * b
    }
}

/// Contrast-limited adaptive histogram equalisation of a normalised
/// image. Tiles that do not divide the image are filled by mirror
/// padding; each output pixel blends the four nearest tile mappings
/// bilinearly, with edge tiles extended.
pub fn clahe(img: &GrayImage, p: &ClaheParams) -> Result<GrayImage> {
    p.validate()?;
    if img.width == 0 || img.height == 0 {
        return Err(Error::Invalid("clahe: empty image".into()));
    }
    let tile_w = img.width.div_ceil(p.tiles_x);
    let tile_h = img.height.div_ceil(p.tiles_y);
    let mut maps = Vec::with_capacity(p.tiles_x * p.tiles_y);
    for ty in 0..p.tiles_y {
        for tx in 0..p.tiles_x {
            let values = (0..tile_h).flat_map(|dy| {
                (0..tile_w).map(move |dx| {
                    let x = reflect(tx * tile_w + dx, img.width);
                    let y = reflect(ty * tile_h + dy, img.height);
                    img.get(x, y)
                })
            });
            maps.push(tile_map(values, p.bins, p.clip_limit));
        }
    }

    let axis = |pos: usize, tile: usize, tiles: usize| -> (usize, usize, f64) {
        let f = (pos as f64 + 0.5) / tile as f64 - 0.5;
        let lo = f.floor();
        let frac = f - lo;
        let clamp = |i: f64| (i.max(0.0) as usize).min(tiles - 1);
        (clamp(lo), clamp(lo + 1.0), frac)
    };

    let mut out = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        let (y0, y1, ay) = axis(y, tile_h, p.tiles_y);
        for x in 0..img.width {
            let (x0, x1, ax) = axis(x, tile_w, p.tiles_x);
            let v = img.get(x, y);
            let m = |tx: usize, ty: usize| maps[ty * p.tiles_x + tx].apply(v, p.bins);
            let top = lerp(m(x0, y0), m(x1, y0), ax);
            let bottom = lerp(m(x0, y1), m(x1, y1), ax);
            out.push(lerp(top, bottom, ay).clamp(0.0, 1.0));
        }
    }
    GrayImage::new(img.width, img.height, out)
}

/// Windowing followed by CLAHE.
pub fn enhance(img: &GrayImage, window: &WindowParams, clahe_params: &ClaheParams) -> Result<GrayImage> {
    clahe(&ct_window(img, window)?, clahe_params)
}

pub const BACKGROUND_HU: f64 = -100.0;
pub const ORGAN_HU: f64 = 60.0;
/// Largest random shift of the organ centre from the image centre.
pub const ORGAN_JITTER: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub count: usize,
    pub size: usize,
    pub organ_radius: (f64, f64),
    pub lesion_radius: (f64, f64),
    /// Lesion offset from organ intensity in HU; each lesion is randomly
    /// darker or brighter.
    pub lesion_contrast: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            count: 8,
            size: 64,
            organ_radius: (18.0, 26.0),
            lesion_radius: (3.0, 7.0),
            lesion_contrast: 60.0,
            noise_sigma: 10.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (o_lo, o_hi) = self.organ_radius;
        let (l_lo, l_hi) = self.lesion_radius;
        if self.size == 0 {
            return Err(Error::config("size", "must be positive"));
        }
        if !(o_lo > 0.0 && o_lo <= o_hi) {
            return Err(Error::config("organ_radius", "need 0 < min <= max"));
        }
        if !(l_lo > 0.0 && l_lo <= l_hi) {
            return Err(Error::config("lesion_radius", "need 0 < min <= max"));
        }
        if o_hi + ORGAN_JITTER > self.size as f64 / 2.0 - 1.0 {
            return Err(Error::config(
                "organ_radius",
                format!("organ of radius {o_hi} does not fit a {0}x{0} image", self.size),
            ));
        }
        if l_hi + 1.0 > o_lo {
            return Err(Error::config(
                "lesion_radius",
                format!("lesion of radius {l_hi} cannot fit inside an organ of radius {o_lo}"),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and non-negative"));
        }
        if !self.lesion_contrast.is_finite() {
            return Err(Error::config("lesion_contrast", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    /// Hounsfield units.
    pub image: GrayImage,
    pub mask: SegmentationMask,
    pub organ: SegmentationMask,
}

struct Disk {
    cx: f64,
    cy: f64,
    r: f64,
}

impl Disk {
    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        dx * dx + dy * dy <= self.r * self.r
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// One phantom, drawn from `ChaCha8(seed)`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = spec.size as f64 / 2.0;
    let organ = Disk {
        cx: half + rng.gen_range(-ORGAN_JITTER..ORGAN_JITTER),
        cy: half + rng.gen_range(-ORGAN_JITTER..ORGAN_JITTER),
        r: uniform(&mut rng, spec.organ_radius),
    };
    let lesion_count = rng.gen_range(1..=3);
    let mut lesions = Vec::with_capacity(lesion_count);
    for _ in 0..lesion_count {
        let r = uniform(&mut rng, spec.lesion_radius);
        let reach = organ.r - r - 1.0;
        let dist = reach * rng.gen::<f64>().sqrt();
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let sign = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        lesions.push((
            Disk {
                cx: organ.cx + dist * angle.cos(),
                cy: organ.cy + dist * angle.sin(),
                r,
            },
            ORGAN_HU + sign * spec.lesion_contrast,
        ));
    }
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let n = spec.size;
    let mut pixels = Vec::with_capacity(n * n);
    let mut lesion_labels = Vec::with_capacity(n * n);
    let mut organ_labels = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let in_organ = organ.contains(x, y);
            let mut value = if in_organ { ORGAN_HU } else { BACKGROUND_HU };
            let mut in_lesion = false;
            for (disk, hu) in &lesions {
                if disk.contains(x, y) {
                    value = *hu;
                    in_lesion = true;
                }
            }
            pixels.push(value + noise.sample(&mut rng));
            lesion_labels.push(in_lesion as u8);
            organ_labels.push(in_organ as u8);
        }
    }
    Ok(Phantom {
        image: GrayImage::new(n, n, pixels)?,
        mask: SegmentationMask::new(n, n, lesion_labels)?,
        organ: SegmentationMask::new(n, n, organ_labels)?,
    })
}

/// `spec.count` phantoms; sample `i` uses seed `spec.seed + i`.
pub fn generate_phantoms(spec: &PhantomSpec) -> Result<Vec<Phantom>> {
    spec.validate()?;
    (0..spec.count)
        .map(|i| generate_phantom(spec, spec.seed.wrapping_add(i as u64)))
        .collect()
}
