//! Scale-invariant keypoints with 128-d gradient-histogram descriptors.
//!
//! Classic pipeline: 2× upsampled base, Gaussian scale space with three
//! layers per octave, difference-of-Gaussian extrema refined to sub-pixel
//! accuracy, contrast and edge rejection, dominant orientations from a
//! 36-bin histogram, and a 4×4×8 descriptor. Works on `[0, 1]` grayscale.

use crate::image::reflect_signed;

const LAYERS: usize = 3;
const SIGMA: f64 = 1.6;
/// Assumed blur of the input image.
const INIT_SIGMA: f64 = 0.5;
const CONTRAST: f64 = 0.04;
const EDGE_RATIO: f64 = 10.0;
const BORDER: usize = 5;
const MAX_INTERP_STEPS: usize = 5;
const ORI_BINS: usize = 36;
const ORI_PEAK_RATIO: f64 = 0.8;
const DESC_WIDTH: usize = 4;
const DESC_BINS: usize = 8;
const DESC_MAG_THR: f32 = 0.2;

pub const DESCRIPTOR_LEN: usize = DESC_WIDTH * DESC_WIDTH * DESC_BINS;

#[derive(Clone, Debug)]
pub struct Keypoint {
    /// Position in input-image pixels.
    pub x: f64,
    pub y: f64,
    /// Scale in input-image pixels.
    pub sigma: f64,
    /// Dominant gradient orientation, radians in `[0, 2π)` (y axis down).
    pub angle: f64,
    pub response: f64,
    pub descriptor: [f32; DESCRIPTOR_LEN],
}

#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Plane {
    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    fn upsample2(&self) -> Plane {
        let (w, h) = (self.w * 2, self.h * 2);
        let mut data = vec![0.0; w * h];
        for y in 0..h {
            let sy = (y as f64 * 0.5).min((self.h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(self.h - 1);
            let fy = (sy - y0 as f64) as f32;
            for x in 0..w {
                let sx = (x as f64 * 0.5).min((self.w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(self.w - 1);
                let fx = (sx - x0 as f64) as f32;
                let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
                let bot = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
                data[y * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
        Plane { w, h, data }
    }

    fn downsample2(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.at(2 * x, 2 * y));
            }
        }
        Plane { w, h, data }
    }

    fn blur(&self, sigma: f64) -> Plane {
        let radius = ((4.0 * sigma).ceil() as usize).max(1);
        let taps: Vec<f32> = {
            let raw: Vec<f64> = (0..=2 * radius)
                .map(|i| {
                    let d = i as f64 - radius as f64;
                    (-d * d / (2.0 * sigma * sigma)).exp()
                })
                .collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| (v / s) as f32).collect()
        };
        let (w, h) = (self.w, self.h);
        let mut tmp = vec![0.0f32; w * h];
        for y in 0..h {
            let row = &self.data[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0f32;
                for (k, t) in taps.iter().enumerate() {
                    let sx = reflect_signed(x as isize + k as isize - radius as isize, w);
                    acc += t * row[sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0f32; w * h];
        for y in 0..h {
            for (k, t) in taps.iter().enumerate() {
                let sy = reflect_signed(y as isize + k as isize - radius as isize, h);
                let src = &tmp[sy * w..(sy + 1) * w];
                let dst = &mut out[y * w..(y + 1) * w];
                for x in 0..w {
                    dst[x] += t * src[x];
                }
            }
        }
        Plane { w, h, data: out }
    }
}

struct Octave {
    gauss: Vec<Plane>,
    dog: Vec<Plane>,
}

fn build_pyramid(base: Plane, octaves: usize) -> Vec<Octave> {
    let k = 2f64.powf(1.0 / LAYERS as f64);
    let mut sigmas = vec![SIGMA];
    for i in 1..LAYERS + 3 {
        let prev = SIGMA * k.powi(i as i32 - 1);
        let total = prev * k;
        sigmas.push((total * total - prev * prev).sqrt());
    }
    let mut out: Vec<Octave> = Vec::with_capacity(octaves);
    for o in 0..octaves {
        let first = if o == 0 {
            base.clone()
        } else {
            out[o - 1].gauss[LAYERS].downsample2()
        };
        let mut gauss = vec![first];
        for s in sigmas.iter().skip(1) {
            let next = gauss.last().expect("non-empty").blur(*s);
            gauss.push(next);
        }
        let dog = gauss
            .windows(2)
            .map(|p| Plane {
                w: p[0].w,
                h: p[0].h,
                data: p[1].data.iter().zip(&p[0].data).map(|(a, b)| a - b).collect(),
            })
            .collect();
        out.push(Octave { gauss, dog });
    }
    out
}

/// Detects keypoints and computes descriptors for a grayscale image.
pub fn detect_and_describe(gray: &[f32], width: usize, height: usize) -> Vec<Keypoint> {
    assert_eq!(gray.len(), width * height, "gray buffer size");
    if width < 16 || height < 16 {
        return Vec::new();
    }
    let input = Plane { w: width, h: height, data: gray.to_vec() };
    let up = input.upsample2();
    let base_sigma = (SIGMA * SIGMA - 4.0 * INIT_SIGMA * INIT_SIGMA).max(0.01).sqrt();
    let base = up.blur(base_sigma);
    let min_side = width.min(height) as f64;
    let octaves = ((min_side.log2().round() as isize) - 1).max(1) as usize;
    let pyramid = build_pyramid(base, octaves);

    let mut kps = Vec::new();
    let threshold = (0.5 * CONTRAST / LAYERS as f64) as f32;
    for (o, oct) in pyramid.iter().enumerate() {
        let (w, h) = (oct.dog[0].w, oct.dog[0].h);
        if w <= 2 * BORDER + 2 || h <= 2 * BORDER + 2 {
            break;
        }
        for layer in 1..=LAYERS {
            let (prev, cur, next) = (&oct.dog[layer - 1], &oct.dog[layer], &oct.dog[layer + 1]);
            for y in BORDER..h - BORDER {
                for x in BORDER..w - BORDER {
                    let v = cur.at(x, y);
                    if v.abs() <= threshold || !is_extremum(prev, cur, next, x, y, v) {
                        continue;
                    }
                    if let Some(c) = refine(oct, layer, x, y) {
                        let scale = 2f64.powi(o as i32);
                        let octave_sigma = SIGMA * 2f64.powf(c.layer_offset / LAYERS as f64);
                        let img = &oct.gauss[c.layer];
                        for angle in orientations(img, c.xi, c.yi, octave_sigma) {
                            let descriptor = describe(img, c.x, c.y, angle, octave_sigma);
                            kps.push(Keypoint {
                                // Undo the initial 2× upsampling.
                                x: c.x * scale * 0.5,
                                y: c.y * scale * 0.5,
                                sigma: octave_sigma * scale * 0.5,
                                angle,
                                response: c.response,
                                descriptor,
                            });
                        }
                    }
                }
            }
        }
    }
    kps
}

fn is_extremum(prev: &Plane, cur: &Plane, next: &Plane, x: usize, y: usize, v: f32) -> bool {
    let is_max = v > 0.0;
    for p in [prev, cur, next] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                if std::ptr::eq(p, cur) && xx == x && yy == y {
                    continue;
                }
                let n = p.at(xx, yy);
                if (is_max && n > v) || (!is_max && n < v) {
                    return false;
                }
            }
        }
    }
    true
}

struct Refined {
    /// Sub-pixel position in octave pixels.
    x: f64,
    y: f64,
    /// Nearest integer sample after refinement.
    xi: usize,
    yi: usize,
    layer: usize,
    /// Fractional layer index (`layer + ds`).
    layer_offset: f64,
    response: f64,
}

fn refine(oct: &Octave, mut layer: usize, mut x: usize, mut y: usize) -> Option<Refined> {
    let (w, h) = (oct.dog[0].w, oct.dog[0].h);
    let mut offset = [0.0f64; 3];
    let mut grad = [0.0f64; 3];
    let mut converged = false;
    for _ in 0..MAX_INTERP_STEPS {
        let d = |l: usize, dx: isize, dy: isize| -> f64 {
            oct.dog[l].at((x as isize + dx) as usize, (y as isize + dy) as usize) as f64
        };
        let v2 = 2.0 * d(layer, 0, 0);
        grad = [
            (d(layer, 1, 0) - d(layer, -1, 0)) * 0.5,
            (d(layer, 0, 1) - d(layer, 0, -1)) * 0.5,
            (d(layer + 1, 0, 0) - d(layer - 1, 0, 0)) * 0.5,
        ];
        let dxx = d(layer, 1, 0) + d(layer, -1, 0) - v2;
        let dyy = d(layer, 0, 1) + d(layer, 0, -1) - v2;
        let dss = d(layer + 1, 0, 0) + d(layer - 1, 0, 0) - v2;
        let dxy = (d(layer, 1, 1) - d(layer, -1, 1) - d(layer, 1, -1) + d(layer, -1, -1)) * 0.25;
        let dxs = (d(layer + 1, 1, 0) - d(layer + 1, -1, 0) - d(layer - 1, 1, 0) + d(layer - 1, -1, 0)) * 0.25;
        let dys = (d(layer + 1, 0, 1) - d(layer + 1, 0, -1) - d(layer - 1, 0, 1) + d(layer - 1, 0, -1)) * 0.25;
        let hess = nalgebra::Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        let g = nalgebra::Vector3::new(grad[0], grad[1], grad[2]);
        let sol = hess.lu().solve(&g)?;
        offset = [-sol[0], -sol[1], -sol[2]];
        if offset.iter().all(|v| v.abs() < 0.5) {
            converged = true;
            break;
        }
        if offset.iter().any(|v| v.abs() > 1e6) {
            return None;
        }
        let nx = x as isize + offset[0].round() as isize;
        let ny = y as isize + offset[1].round() as isize;
        let nl = layer as isize + offset[2].round() as isize;
        if nl < 1 || nl > LAYERS as isize || nx < BORDER as isize || ny < BORDER as isize
            || nx >= (w - BORDER) as isize || ny >= (h - BORDER) as isize
        {
            return None;
        }
        x = nx as usize;
        y = ny as usize;
        layer = nl as usize;
    }
    if !converged {
        return None;
    }
    let v = oct.dog[layer].at(x, y) as f64;
    let contrast = v + 0.5 * (grad[0] * offset[0] + grad[1] * offset[1] + grad[2] * offset[2]);
    if contrast.abs() * (LAYERS as f64) < CONTRAST {
        return None;
    }
    let d = |dx: isize, dy: isize| -> f64 {
        oct.dog[layer].at((x as isize + dx) as usize, (y as isize + dy) as usize) as f64
    };
    let dxx = d(1, 0) + d(-1, 0) - 2.0 * v;
    let dyy = d(0, 1) + d(0, -1) - 2.0 * v;
    let dxy = (d(1, 1) - d(-1, 1) - d(1, -1) + d(-1, -1)) * 0.25;
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    if det <= 0.0 || tr * tr * EDGE_RATIO >= (EDGE_RATIO + 1.0).powi(2) * det {
        return None;
    }
    Some(Refined {
        x: x as f64 + offset[0],
        y: y as f64 + offset[1],
        xi: x,
        yi: y,
        layer,
        layer_offset: layer as f64 + offset[2],
        response: contrast.abs(),
    })
}

#[inline]
fn gradient(img: &Plane, x: usize, y: usize) -> (f64, f64) {
    let dx = img.at(x + 1, y) - img.at(x - 1, y);
    let dy = img.at(x, y + 1) - img.at(x, y - 1);
    (dx as f64, dy as f64)
}

fn orientations(img: &Plane, x: usize, y: usize, sigma: f64) -> Vec<f64> {
    let weight_sigma = 1.5 * sigma;
    let radius = (3.0 * weight_sigma).round() as isize;
    let denom = -1.0 / (2.0 * weight_sigma * weight_sigma);
    let mut hist = [0.0f64; ORI_BINS];
    for i in -radius..=radius {
        let yy = y as isize + i;
        if yy <= 0 || yy >= img.h as isize - 1 {
            continue;
        }
        for j in -radius..=radius {
            let xx = x as isize + j;
            if xx <= 0 || xx >= img.w as isize - 1 {
                continue;
            }
            let (gx, gy) = gradient(img, xx as usize, yy as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            let ang = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
            let bin = ((ang / std::f64::consts::TAU * ORI_BINS as f64).round() as usize) % ORI_BINS;
            hist[bin] += ((i * i + j * j) as f64 * denom).exp() * mag;
        }
    }
    let n = ORI_BINS;
    let smooth: Vec<f64> = (0..n)
        .map(|b| {
            (hist[(b + n - 2) % n] + hist[(b + 2) % n]) / 16.0
                + (hist[(b + n - 1) % n] + hist[(b + 1) % n]) * 4.0 / 16.0
                + hist[b] * 6.0 / 16.0
        })
        .collect();
    let peak = smooth.iter().cloned().fold(0.0, f64::max);
    let mut out = Vec::new();
    if peak <= 0.0 {
        return out;
    }
    for b in 0..n {
        let l = smooth[(b + n - 1) % n];
        let r = smooth[(b + 1) % n];
        let c = smooth[b];
        if c > l && c > r && c >= ORI_PEAK_RATIO * peak {
            let shift = 0.5 * (l - r) / (l - 2.0 * c + r);
            let bin = (b as f64 + shift).rem_euclid(n as f64);
            out.push(bin / n as f64 * std::f64::consts::TAU);
        }
    }
    out
}

fn describe(img: &Plane, x: f64, y: f64, angle: f64, sigma: f64) -> [f32; DESCRIPTOR_LEN] {
    let d = DESC_WIDTH as f64;
    let nb = DESC_BINS;
    let hist_width = 3.0 * sigma;
    let radius = ((hist_width * std::f64::consts::SQRT_2 * (d + 1.0) * 0.5).round() as isize)
        .min(((img.w * img.w + img.h * img.h) as f64).sqrt() as isize);
    let (sin_a, cos_a) = angle.sin_cos();
    let exp_scale = -1.0 / (d * d * 0.5);
    let bins_per_rad = nb as f64 / std::f64::consts::TAU;
    let (xi, yi) = (x.round() as isize, y.round() as isize);
    // (d + 2)² × (nb + 2) accumulator; the padding absorbs interpolation spill.
    let dw = DESC_WIDTH + 2;
    let mut hist = vec![0.0f64; dw * dw * (nb + 2)];
    for i in -radius..=radius {
        for j in -radius..=radius {
            // Offset relative to the sub-pixel center, rotated into the keypoint frame.
            let ox = (xi + j) as f64 - x;
            let oy = (yi + i) as f64 - y;
            let c_rot = (ox * cos_a + oy * sin_a) / hist_width;
            let r_rot = (-ox * sin_a + oy * cos_a) / hist_width;
            let rbin = r_rot + d / 2.0 - 0.5;
            let cbin = c_rot + d / 2.0 - 0.5;
            if !(rbin > -1.0 && rbin < d && cbin > -1.0 && cbin < d) {
                continue;
            }
            let (px, py) = (xi + j, yi + i);
            if px <= 0 || py <= 0 || px >= img.w as isize - 1 || py >= img.h as isize - 1 {
                continue;
            }
            let (gx, gy) = gradient(img, px as usize, py as usize);
            let mag = (gx * gx + gy * gy).sqrt() * ((c_rot * c_rot + r_rot * r_rot) * exp_scale).exp();
            let obin = (gy.atan2(gx) - angle).rem_euclid(std::f64::consts::TAU) * bins_per_rad;

            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (fr, fc, fo) = (rbin - r0, cbin - c0, obin - o0);
            let (r0, c0) = (r0 as isize, c0 as isize);
            let o0 = (o0 as usize) % nb;
            for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
                for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
                    for (dob, wo) in [(0, 1.0 - fo), (1, fo)] {
                        let r = (r0 + dr + 1) as usize;
                        let c = (c0 + dc + 1) as usize;
                        let ob = (o0 + dob) % nb;
                        hist[(r * dw + c) * (nb + 2) + ob] += mag * wr * wc * wo;
                    }
                }
            }
        }
    }
    let mut desc = [0.0f32; DESCRIPTOR_LEN];
    for r in 0..DESC_WIDTH {
        for c in 0..DESC_WIDTH {
            for o in 0..nb {
                desc[(r * DESC_WIDTH + c) * nb + o] = hist[((r + 1) * dw + c + 1) * (nb + 2) + o] as f32;
            }
        }
    }
    normalize(&mut desc);
    for v in &mut desc {
        *v = v.min(DESC_MAG_THR);
    }
    normalize(&mut desc);
    desc
}

fn normalize(v: &mut [f32]) {
    let n = v.iter().map(|a| a * a).sum::<f32>().sqrt();
    if n > 0.0 {
        for a in v {
            *a /= n;
        }
    }
}

/// Nearest-neighbour matches passing the distance-ratio test, as
/// `(index_in_a, index_in_b)`.
pub fn match_descriptors(a: &[Keypoint], b: &[Keypoint], ratio: f32) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if b.len() < 2 {
        return out;
    }
    let r2 = ratio * ratio;
    for (i, ka) in a.iter().enumerate() {
        let (mut best, mut second, mut best_j) = (f32::INFINITY, f32::INFINITY, 0);
        for (j, kb) in b.iter().enumerate() {
            let mut d = 0.0f32;
            for (p, q) in ka.descriptor.iter().zip(&kb.descriptor) {
                let t = p - q;
                d += t * t;
            }
            if d < best {
                second = best;
                best = d;
                best_j = j;
            } else if d < second {
                second = d;
            }
        }
        if best < r2 * second {
            out.push((i, best_j));
        }
    }
    out
}
