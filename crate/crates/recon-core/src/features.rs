//! Frame pre-processing and an ORB-style feature stack: blur scoring,
//! contrast-limited adaptive histogram equalisation, an image pyramid,
//! FAST segment-test corners with intensity-centroid orientation, steered
//! 256-bit binary descriptors and ratio-tested mutual matching.

use std::sync::OnceLock;

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::{quantize, GrayImage};

pub const MIN_PYRAMID_LEVELS: usize = 8;
pub const MIN_TOP_LEVEL_SIZE: usize = 16;
/// Contiguous arc length of the segment test (out of 16 circle pixels).
pub const FAST_ARC: usize = 9;
/// Keypoints closer than this to the border of their level are not described.
pub const DESCRIPTOR_MARGIN: usize = 15;
pub const DESCRIPTOR_BITS: usize = 256;
const PATTERN_RADIUS: f64 = 13.0;
const ORIENTATION_RADIUS: i32 = 15;
const HIST_BINS: usize = 256;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum FeatureError {
    #[error("pyramid needs at least {MIN_PYRAMID_LEVELS} levels, got {0}")]
    TooFewLevels(usize),
    #[error("scale factor must be > 1, got {0}")]
    BadScaleFactor(f64),
    #[error("image {width}x{height} too small: top level would be {top_w}x{top_h}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        top_w: usize,
        top_h: usize,
    },
}

/// Variance of the 3×3 Laplacian response over interior pixels. Low values
/// indicate blurry or content-less frames.
pub fn blur_score(img: &GrayImage) -> f64 {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return 0.0;
    }
    let p = img.pixels();
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let n = ((w - 2) * (h - 2)) as f64;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let l = p[i - 1] as f64 + p[i + 1] as f64 + p[i - w] as f64 + p[i + w] as f64 - 4.0 * p[i] as f64;
            sum += l;
            sum2 += l * l;
        }
    }
    let mean = sum / n;
    (sum2 / n - mean * mean).max(0.0)
}

/// Contrast-limited adaptive histogram equalisation.
///
/// `tiles` is the `(columns, rows)` grid; `clip` is the histogram clip
/// limit as a multiple of the mean bin count. Excess counts are spread
/// uniformly over all bins, so `clip = 0` gives a flat histogram and hence
/// the identity mapping. Tiles whose pixels all fall in one bin also map to
/// the identity. Per-tile mappings are blended bilinearly between tile
/// centres.
pub fn equalize_adaptive(img: &GrayImage, tiles: (usize, usize), clip: f64) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let tx = tiles.0.clamp(1, w);
    let ty = tiles.1.clamp(1, h);
    let tile_w = w as f64 / tx as f64;
    let tile_h = h as f64 / ty as f64;
    let bin_of = |v: f32| ((v as f64 * HIST_BINS as f64) as usize).min(HIST_BINS - 1);

    let mut hists = vec![[0u32; HIST_BINS]; tx * ty];
    for y in 0..h {
        let ti = ((y as f64 / tile_h) as usize).min(ty - 1);
        for x in 0..w {
            let tj = ((x as f64 / tile_w) as usize).min(tx - 1);
            hists[ti * tx + tj][bin_of(img.get(x, y))] += 1;
        }
    }
    // cdf[t][b] = mapped value at the lower edge of bin b, b in 0..=BINS.
    let cdfs: Vec<Option<Vec<f64>>> = hists
        .iter()
        .map(|hist| {
            let total: u32 = hist.iter().sum();
            let occupied = hist.iter().filter(|&&c| c > 0).count();
            if total == 0 || occupied <= 1 {
                return None;
            }
            let limit = clip.max(0.0) * total as f64 / HIST_BINS as f64;
            let mut excess = 0.0;
            let mut clipped = [0.0f64; HIST_BINS];
            for (c, &hv) in clipped.iter_mut().zip(hist) {
                let hv = hv as f64;
                if hv > limit {
                    excess += hv - limit;
                    *c = limit;
                } else {
                    *c = hv;
                }
            }
            let add = excess / HIST_BINS as f64;
            let mut cdf = Vec::with_capacity(HIST_BINS + 1);
            let mut acc = 0.0;
            cdf.push(0.0);
            for c in clipped {
                acc += c + add;
                cdf.push(acc / total as f64);
            }
            Some(cdf)
        })
        .collect();

    let map = |t: usize, v: f32| -> f64 {
        match &cdfs[t] {
            None => v as f64,
            Some(cdf) => {
                let pos = (v as f64 * HIST_BINS as f64).min(HIST_BINS as f64);
                let b = (pos as usize).min(HIST_BINS - 1);
                let frac = pos - b as f64;
                cdf[b] + (cdf[b + 1] - cdf[b]) * frac
            }
        }
    };

    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let gy = ((y as f64 + 0.5) / tile_h - 0.5).clamp(0.0, (ty - 1) as f64);
        let y0 = gy.floor() as usize;
        let y1 = (y0 + 1).min(ty - 1);
        let ay = gy - y0 as f64;
        for x in 0..w {
            let gx = ((x as f64 + 0.5) / tile_w - 0.5).clamp(0.0, (tx - 1) as f64);
            let x0 = gx.floor() as usize;
            let x1 = (x0 + 1).min(tx - 1);
            let ax = gx - x0 as f64;
            let v = img.get(x, y);
            let top = map(y0 * tx + x0, v) * (1.0 - ax) + map(y0 * tx + x1, v) * ax;
            let bot = map(y1 * tx + x0, v) * (1.0 - ax) + map(y1 * tx + x1, v) * ax;
            out.push((top * (1.0 - ay) + bot * ay).clamp(0.0, 1.0) as f32);
        }
    }
    GrayImage::new(w, h, out).expect("same dimensions")
}

/// Scale-space pyramid. Level 0 is the input; every further level is an
/// area-averaged resampling of the previous one, quantised to 8 bits.
#[derive(Debug, Clone)]
pub struct ImagePyramid {
    levels: Vec<GrayImage>,
    scale_factor: f64,
}

impl ImagePyramid {
    pub fn levels(&self) -> &[GrayImage] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> &GrayImage {
        &self.levels[k]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn scale_factor(&self) -> f64 {
        self.scale_factor
    }

    /// Base-to-level coordinate ratios `(sx, sy)`.
    pub fn scale(&self, k: usize) -> (f64, f64) {
        let base = &self.levels[0];
        let l = &self.levels[k];
        (
            base.width() as f64 / l.width() as f64,
            base.height() as f64 / l.height() as f64,
        )
    }

    /// Nominal scale `scale_factor^k`, used for per-level noise models.
    pub fn nominal_scale(&self, k: usize) -> f64 {
        self.scale_factor.powi(k as i32)
    }
}

pub fn level_size(base: usize, scale_factor: f64, k: usize) -> usize {
    (base as f64 / scale_factor.powi(k as i32)).floor() as usize
}

pub fn build_pyramid(img: &GrayImage, levels: usize, scale_factor: f64) -> Result<ImagePyramid, FeatureError> {
    if levels < MIN_PYRAMID_LEVELS {
        return Err(FeatureError::TooFewLevels(levels));
    }
    if !(scale_factor > 1.0) {
        return Err(FeatureError::BadScaleFactor(scale_factor));
    }
    let (w, h) = (img.width(), img.height());
    let top_w = level_size(w, scale_factor, levels - 1);
    let top_h = level_size(h, scale_factor, levels - 1);
    if top_w < MIN_TOP_LEVEL_SIZE || top_h < MIN_TOP_LEVEL_SIZE {
        return Err(FeatureError::ImageTooSmall {
            width: w,
            height: h,
            top_w,
            top_h,
        });
    }
    let mut out = Vec::with_capacity(levels);
    out.push(img.clone());
    for k in 1..levels {
        let prev = &out[k - 1];
        let nw = level_size(w, scale_factor, k);
        let nh = level_size(h, scale_factor, k);
        out.push(resample_area(prev, nw, nh));
    }
    Ok(ImagePyramid {
        levels: out,
        scale_factor,
    })
}

/// Per output sample: first source index and the coverage weights.
fn box_weights(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let a = o as f64 * ratio;
            let b = ((o + 1) as f64 * ratio).min(src as f64);
            let first = a.floor() as usize;
            let last = (b.ceil() as usize).min(src);
            let mut ws = Vec::with_capacity(last - first);
            for i in first..last {
                let lo = a.max(i as f64);
                let hi = b.min((i + 1) as f64);
                ws.push((hi - lo).max(0.0));
            }
            let total: f64 = ws.iter().sum();
            for wv in &mut ws {
                *wv /= total;
            }
            (first, ws)
        })
        .collect()
}

fn resample_area(img: &GrayImage, nw: usize, nh: usize) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let wx = box_weights(w, nw);
    let wy = box_weights(h, nh);
    let p = img.pixels();
    let mut tmp = vec![0.0f64; nw * h];
    for y in 0..h {
        let row = &p[y * w..(y + 1) * w];
        for (ox, (first, ws)) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for (k, wv) in ws.iter().enumerate() {
                acc += wv * row[first + k] as f64;
            }
            tmp[y * nw + ox] = acc;
        }
    }
    let mut out = Vec::with_capacity(nw * nh);
    for (first, ws) in &wy {
        for ox in 0..nw {
            let mut acc = 0.0;
            for (k, wv) in ws.iter().enumerate() {
                acc += wv * tmp[(first + k) * nw + ox];
            }
            out.push(quantize(acc as f32) as f32 / 255.0);
        }
    }
    GrayImage::new(nw, nh, out).expect("dimensions")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Base-level pixel coordinates.
    pub position: Vector2<f64>,
    pub level: usize,
    /// Radians in `[0, 2π)`.
    pub orientation: f64,
    pub response: f64,
}

const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// Segment-test score: the largest threshold for which an arc of
/// `FAST_ARC` contiguous circle pixels is entirely brighter (or darker)
/// than the centre. Values are 8-bit intensities.
#[inline]
fn fast_score(ring: &[i16; 16], center: i16) -> i16 {
    let mut best = 0i16;
    for start in 0..16 {
        let mut bright = i16::MAX;
        let mut dark = i16::MAX;
        for k in 0..FAST_ARC {
            let v = ring[(start + k) % 16];
            bright = bright.min(v - center);
            dark = dark.min(center - v);
            if bright <= best && dark <= best {
                break;
            }
        }
        best = best.max(bright).max(dark);
    }
    best
}

/// Raw segment-test corners of one 8-bit level: `(x, y, score)` before
/// non-maximum suppression, with a packed ranking key. `threshold` is in
/// 8-bit units.
fn segment_test_level(data: &[u8], w: usize, h: usize, threshold: i16) -> Vec<(usize, usize, i32)> {
    let mut out = Vec::new();
    if w < 7 || h < 7 {
        return out;
    }
    let offs: Vec<isize> = CIRCLE.iter().map(|&(dx, dy)| dy as isize * w as isize + dx as isize).collect();
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            let i = (y * w + x) as isize;
            let c = data[i as usize] as i16;
            // Quick rejection: an arc of 9 covers at least two of the four
            // compass points.
            let hi = c + threshold;
            let lo = c - threshold;
            let mut nb = 0;
            let mut nd = 0;
            for k in [0usize, 4, 8, 12] {
                let v = data[(i + offs[k]) as usize] as i16;
                nb += (v > hi) as i32;
                nd += (v < lo) as i32;
            }
            if nb < 2 && nd < 2 {
                continue;
            }
            let mut ring = [0i16; 16];
            for k in 0..16 {
                ring[k] = data[(i + offs[k]) as usize] as i16;
            }
            let s = fast_score(&ring, c);
            if s > threshold {
                // Ties on the segment score are broken by total ring contrast.
                let contrast: i32 = ring.iter().map(|&v| (v - c).abs() as i32).sum();
                out.push((x, y, s as i32 * 4096 + contrast));
            }
        }
    }
    out
}

/// 3×3 non-maximum suppression; ties keep the first in raster order.
fn non_max_suppress(corners: &[(usize, usize, i32)], w: usize, h: usize) -> Vec<(usize, usize, i32)> {
    let mut score = vec![0i32; w * h];
    for &(x, y, s) in corners {
        score[y * w + x] = s;
    }
    corners
        .iter()
        .copied()
        .filter(|&(x, y, s)| {
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = x as i32 + dx;
                    let ny = y as i32 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i32 || ny >= h as i32 {
                        continue;
                    }
                    let ns = score[ny as usize * w + nx as usize];
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if ns > s || (ns == s && earlier) {
                        return false;
                    }
                }
            }
            true
        })
        .collect()
}

/// Intensity-centroid orientation over a disc of radius 15, in `[0, 2π)`.
fn orientation(img: &GrayImage, x: usize, y: usize) -> f64 {
    let (w, h) = (img.width() as i32, img.height() as i32);
    let (cx, cy) = (x as i32, y as i32);
    let r = ORIENTATION_RADIUS;
    let mut m01 = 0.0f64;
    let mut m10 = 0.0f64;
    for dy in -r..=r {
        let yy = cy + dy;
        if yy < 0 || yy >= h {
            continue;
        }
        let span = ((r * r - dy * dy) as f64).sqrt() as i32;
        for dx in -span..=span {
            let xx = cx + dx;
            if xx < 0 || xx >= w {
                continue;
            }
            let v = img.get(xx as usize, yy as usize) as f64;
            m10 += dx as f64 * v;
            m01 += dy as f64 * v;
        }
    }
    let a = m01.atan2(m10);
    let a = if a < 0.0 { a + std::f64::consts::TAU } else { a };
    if a >= std::f64::consts::TAU {
        0.0
    } else {
        a
    }
}

/// FAST corners over all pyramid levels.
///
/// `threshold` is relative to the `[0, 1]` intensity range. The budget
/// `max_count` is split across levels in proportion to level area; the
/// union is sorted by decreasing response and truncated to `max_count`.
pub fn detect_keypoints(pyr: &ImagePyramid, threshold: f64, max_count: usize) -> Vec<Keypoint> {
    let t8 = (threshold * 255.0).floor().clamp(0.0, 255.0) as i16;
    let inv_area = 1.0 / (pyr.scale_factor * pyr.scale_factor);
    let n = pyr.len() as i32;
    let first_share = max_count as f64 * (1.0 - inv_area) / (1.0 - inv_area.powi(n));
    let per_level: Vec<Vec<Keypoint>> = (0..pyr.len())
        .into_par_iter()
        .map(|k| {
            let img = pyr.level(k);
            let (w, h) = (img.width(), img.height());
            let data: Vec<u8> = img.to_u8();
            let raw = segment_test_level(&data, w, h, t8);
            let mut kept = non_max_suppress(&raw, w, h);
            kept.sort_by(|a, b| b.2.cmp(&a.2).then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));
            let quota = (first_share * inv_area.powi(k as i32)).ceil() as usize;
            kept.truncate(quota.max(1));
            let (sx, sy) = pyr.scale(k);
            kept.iter()
                .map(|&(x, y, s)| Keypoint {
                    position: Vector2::new((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy),
                    level: k,
                    orientation: orientation(img, x, y),
                    response: s as f64 / (4096.0 * 255.0),
                })
                .collect()
        })
        .collect();
    let mut all: Vec<Keypoint> = per_level.into_iter().flatten().collect();
    all.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.level.cmp(&b.level))
            .then(a.position.y.total_cmp(&b.position.y))
            .then(a.position.x.total_cmp(&b.position.x))
    });
    all.truncate(max_count);
    all
}

/// 256-bit binary descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct BinaryDescriptor(pub [u64; 4]);

impl BinaryDescriptor {
    #[inline]
    pub fn hamming(&self, other: &Self) -> u32 {
        (self.0[0] ^ other.0[0]).count_ones()
            + (self.0[1] ^ other.0[1]).count_ones()
            + (self.0[2] ^ other.0[2]).count_ones()
            + (self.0[3] ^ other.0[3]).count_ones()
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.0[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set_bit(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }
}

/// Fixed comparison pattern: 256 point pairs drawn once from an isotropic
/// Gaussian (σ = 31/5) with a SplitMix64 stream seeded at 0x0RB, restricted
/// to a disc of radius 13 so any rotation stays within the 15 px margin.
pub fn descriptor_pattern() -> &'static [[(f64, f64); 2]; DESCRIPTOR_BITS] {
    static PATTERN: OnceLock<[[(f64, f64); 2]; DESCRIPTOR_BITS]> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut state: u64 = 0x0000_0000_0000_0a0b;
        let mut next = move || {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64
        };
        let sigma = 31.0 / 5.0;
        let mut gauss_point = || loop {
            let u1 = next().max(1e-300);
            let u2 = next();
            let r = (-2.0 * u1.ln()).sqrt() * sigma;
            let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
            let (x, y) = ((r * c).round(), (r * s).round());
            if x * x + y * y <= PATTERN_RADIUS * PATTERN_RADIUS {
                return (x, y);
            }
        };
        let mut pattern = [[(0.0, 0.0); 2]; DESCRIPTOR_BITS];
        for pair in pattern.iter_mut() {
            loop {
                let a = gauss_point();
                let b = gauss_point();
                if a != b {
                    *pair = [a, b];
                    break;
                }
            }
        }
        pattern
    })
}

/// 5×5 binomial smoothing applied before the intensity comparisons.
pub fn smooth(img: &GrayImage) -> GrayImage {
    const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (w, h) = (img.width(), img.height());
    let p = img.pixels();
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in K.iter().enumerate() {
                let xx = (x as i64 + k as i64 - 2).clamp(0, w as i64 - 1) as usize;
                acc += kv * p[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in K.iter().enumerate() {
                let yy = (y as i64 + k as i64 - 2).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    GrayImage::new(w, h, out).expect("dimensions")
}

/// Keypoint position in integer pixel coordinates of its own level.
pub fn level_pixel(pyr: &ImagePyramid, kp: &Keypoint) -> (i64, i64) {
    let (sx, sy) = pyr.scale(kp.level);
    (
        (kp.position.x / sx - 0.5).round() as i64,
        (kp.position.y / sy - 0.5).round() as i64,
    )
}

#[derive(Debug, Clone, Default)]
pub struct Described {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<BinaryDescriptor>,
    /// Indices (into the input list) of keypoints too close to the border.
    pub dropped: Vec<usize>,
}

/// Steered binary descriptors. The comparison pattern is rotated by each
/// keypoint's orientation and evaluated on the smoothed level image.
pub fn describe_keypoints(pyr: &ImagePyramid, kps: &[Keypoint]) -> Described {
    let mut smoothed: Vec<Option<GrayImage>> = vec![None; pyr.len()];
    for kp in kps {
        if kp.level < pyr.len() && smoothed[kp.level].is_none() {
            smoothed[kp.level] = Some(smooth(pyr.level(kp.level)));
        }
    }
    let pattern = descriptor_pattern();
    let mut out = Described::default();
    let m = DESCRIPTOR_MARGIN as i64;
    for (idx, kp) in kps.iter().enumerate() {
        let Some(img) = smoothed.get(kp.level).and_then(|s| s.as_ref()) else {
            out.dropped.push(idx);
            continue;
        };
        let (x, y) = level_pixel(pyr, kp);
        let (w, h) = (img.width() as i64, img.height() as i64);
        if x < m || y < m || x >= w - m || y >= h - m {
            out.dropped.push(idx);
            continue;
        }
        let (s, c) = kp.orientation.sin_cos();
        let at = |p: (f64, f64)| -> f32 {
            let rx = (c * p.0 - s * p.1).round() as i64;
            let ry = (s * p.0 + c * p.1).round() as i64;
            img.get((x + rx) as usize, (y + ry) as usize)
        };
        let mut d = BinaryDescriptor::default();
        for (i, pair) in pattern.iter().enumerate() {
            if at(pair[0]) < at(pair[1]) {
                d.set_bit(i);
            }
        }
        out.keypoints.push(*kp);
        out.descriptors.push(d);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub hamming: u32,
}

/// Best and second-best Hamming distances of `d` against `set`.
fn best_two(d: &BinaryDescriptor, set: &[BinaryDescriptor]) -> (usize, u32, u32) {
    let mut best = (usize::MAX, u32::MAX);
    let mut second = u32::MAX;
    for (j, e) in set.iter().enumerate() {
        let h = d.hamming(e);
        if h < best.1 {
            second = best.1;
            best = (j, h);
        } else if h < second {
            second = h;
        }
    }
    (best.0, best.1, second)
}

/// Nearest-neighbour matching with Lowe's ratio test and mutual-best
/// filtering. When `b` has a single entry the ratio test is vacuous.
pub fn match_descriptors(a: &[BinaryDescriptor], b: &[BinaryDescriptor], ratio: f64) -> Vec<Match> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let forward: Vec<(usize, u32, u32)> = a.par_iter().map(|d| best_two(d, b)).collect();
    let backward: Vec<usize> = b.par_iter().map(|d| best_two(d, a).0).collect();
    forward
        .iter()
        .enumerate()
        .filter_map(|(i, &(j, best, second))| {
            let ratio_ok = b.len() < 2 || (best as f64) < ratio * second as f64;
            (ratio_ok && backward[j] == i).then_some(Match {
                index_a: i,
                index_b: j,
                hamming: best,
            })
        })
        .collect()
}

/// Parameters of the per-frame feature extraction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FeatureConfig {
    pub levels: usize,
    pub scale_factor: f64,
    pub fast_threshold: f64,
    pub max_features: usize,
    /// Cells per image side for spreading keypoints; 0 keeps the strongest overall.
    pub grid_cells: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            levels: MIN_PYRAMID_LEVELS,
            scale_factor: 1.2,
            fast_threshold: 0.04,
            max_features: 1500,
            grid_cells: 0,
        }
    }
}

const SPREAD_OVERSAMPLE: usize = 4;

/// Keeps `max_count` keypoints taken round-robin over a `cells`×`cells`
/// grid, strongest first within each cell. The result stays sorted by
/// response.
pub fn spread_keypoints(kps: Vec<Keypoint>, width: usize, height: usize, cells: usize, max_count: usize) -> Vec<Keypoint> {
    let cells = cells.max(1);
    let cell_of = |k: &Keypoint| {
        let cx = ((k.position.x / width.max(1) as f64 * cells as f64) as usize).min(cells - 1);
        let cy = ((k.position.y / height.max(1) as f64 * cells as f64) as usize).min(cells - 1);
        cy * cells + cx
    };
    // Input is sorted by response, so the running count is the rank in the cell.
    let mut seen = vec![0usize; cells * cells];
    let mut ranked: Vec<(usize, usize)> = kps
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let c = cell_of(k);
            seen[c] += 1;
            (seen[c] - 1, i)
        })
        .collect();
    ranked.sort_unstable();
    ranked.truncate(max_count);
    let mut keep: Vec<usize> = ranked.into_iter().map(|(_, i)| i).collect();
    keep.sort_unstable();
    let mut kps = kps;
    let mut flags = vec![false; kps.len()];
    for i in keep {
        flags[i] = true;
    }
    let mut it = flags.into_iter();
    kps.retain(|_| it.next().unwrap());
    kps
}

/// Keypoints and descriptors of one frame.
#[derive(Debug, Clone, Default)]
pub struct FrameFeatures {
    pub width: usize,
    pub height: usize,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<BinaryDescriptor>,
    /// Nominal scale per pyramid level (`scale_factor^k`).
    pub level_scales: Vec<f64>,
}

impl FrameFeatures {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn level_scale(&self, level: usize) -> f64 {
        self.level_scales.get(level).copied().unwrap_or(1.0)
    }
}

pub fn extract_features(img: &GrayImage, cfg: &FeatureConfig) -> Result<FrameFeatures, FeatureError> {
    let pyr = build_pyramid(img, cfg.levels, cfg.scale_factor)?;
    let kps = if cfg.grid_cells == 0 {
        detect_keypoints(&pyr, cfg.fast_threshold, cfg.max_features)
    } else {
        let candidates = detect_keypoints(&pyr, cfg.fast_threshold, cfg.max_features.saturating_mul(SPREAD_OVERSAMPLE));
        spread_keypoints(candidates, img.width(), img.height(), cfg.grid_cells, cfg.max_features)
    };
    let described = describe_keypoints(&pyr, &kps);
    Ok(FrameFeatures {
        width: img.width(),
        height: img.height(),
        keypoints: described.keypoints,
        descriptors: described.descriptors,
        level_scales: (0..pyr.len()).map(|k| pyr.nominal_scale(k)).collect(),
    })
}
