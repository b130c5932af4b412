use diffarray::Tensor;

use super::{Speaker, CHANNELS, IMAGE_SIZE};
use crate::error::Result;
use crate::face3dmm::{assemble_mesh, embed_mouth_params, lip_vertices, FaceBasis, FaceParams, MouthParams, REST_DIM};

const HALF: usize = IMAGE_SIZE / 2;
const SUPERSAMPLE: usize = 4;
const LIP_COLOR: [f64; 3] = [0.72, 0.22, 0.28];
const MOUTH_COLOR: [f64; 3] = [0.18, 0.04, 0.07];

/// Splits a lip vertex count into (outer ring, inner ring) sizes.
pub fn lip_rings(lip_count: usize) -> (usize, usize) {
    let outer = (lip_count * 12 + 10) / 20;
    (outer, lip_count - outer)
}

fn inside(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0] {
            hit = !hit;
        }
        j = i;
    }
    hit
}

fn area(poly: &[[f64; 2]]) -> f64 {
    let mut s = 0.0;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        s += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * s.abs()
}

fn put(img: &mut [f64], row: usize, col: usize, c: [f64; 3]) {
    for (ch, v) in c.iter().enumerate() {
        img[(ch * IMAGE_SIZE + row) * IMAGE_SIZE + col] = *v;
    }
}

fn get(img: &[f64], row: usize, col: usize) -> [f64; 3] {
    std::array::from_fn(|ch| img[(ch * IMAGE_SIZE + row) * IMAGE_SIZE + col])
}

/// Draws lip rings given in pixel coordinates onto the lower half of a CHW image.
/// A collinear outer ring is drawn as a one-pixel closed-mouth line.
pub fn rasterize_mouth(img: &mut [f64], outer: &[[f64; 2]], inner: &[[f64; 2]]) {
    let lower = HALF as f64;
    if outer.len() < 3 || area(outer) < 1e-9 {
        let (x0, x1) = outer.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p[0]), hi.max(p[0])));
        let y = outer.iter().map(|p| p[1]).sum::<f64>() / outer.len().max(1) as f64;
        let row = y.floor().clamp(lower, IMAGE_SIZE as f64 - 1.0) as usize;
        let lo = x0.floor().max(0.0) as usize;
        let hi = (x1.ceil().max(0.0) as usize).min(IMAGE_SIZE);
        for col in lo..hi {
            put(img, row, col, LIP_COLOR);
        }
        return;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in outer.iter().chain(inner) {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let rows = (y0.floor().max(lower) as usize)..(y1.ceil().clamp(lower, IMAGE_SIZE as f64) as usize);
    let cols = (x0.floor().max(0.0) as usize)..(x1.ceil().clamp(0.0, IMAGE_SIZE as f64) as usize);
    let inner_ok = inner.len() >= 3 && area(inner) >= 1e-9;
    let step = 1.0 / SUPERSAMPLE as f64;
    let share = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for row in rows {
        for col in cols.clone() {
            let bg = get(img, row, col);
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = col as f64 + (sx as f64 + 0.5) * step;
                    let y = row as f64 + (sy as f64 + 0.5) * step;
                    let c = if inner_ok && inside(inner, x, y) {
                        MOUTH_COLOR
                    } else if inside(outer, x, y) {
                        LIP_COLOR
                    } else {
                        bg
                    };
                    for k in 0..3 {
                        acc[k] += c[k] * share;
                    }
                }
            }
            put(img, row, col, acc);
        }
    }
}

/// Renders a `3 × 32 × 32` frame in `[0, 1]`: appearance gradient on top, lips below.
pub fn render_frame(speaker: &Speaker, mouth: &MouthParams, gamma: [f64; 3], basis: &FaceBasis) -> Result<Tensor<f64>> {
    let mut img = vec![0.0; CHANNELS * IMAGE_SIZE * IMAGE_SIZE];
    let (skin, hair) = (speaker.skin(), speaker.hair());
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let dx = (col as f64 + 0.5 - HALF as f64) / HALF as f64;
            let c: [f64; 3] = if row < HALF {
                let t = row as f64 / (HALF - 1) as f64;
                let vignette = 1.0 - 0.12 * dx * dx;
                std::array::from_fn(|k| (hair[k] * (1.0 - t) + skin[k] * t) * vignette)
            } else {
                let shade = 1.0 - 0.15 * (row - HALF) as f64 / HALF as f64;
                std::array::from_fn(|k| skin[k] * shade)
            };
            put(&mut img, row, col, c);
        }
    }
    let beta = embed_mouth_params(mouth, &[0.0; REST_DIM], basis)?;
    let params = FaceParams {
        alpha: speaker.identity_alpha.clone(),
        beta,
        gamma,
    };
    let lips = lip_vertices(&assemble_mesh(basis, &params)?, basis);
    let (sin, cos) = gamma[2].sin_cos();
    let pixels: Vec<[f64; 2]> = lips
        .iter()
        .map(|v| {
            let x = v[0] * cos - v[1] * sin;
            let y = v[0] * sin + v[1] * cos;
            [HALF as f64 + HALF as f64 * x, HALF as f64 - HALF as f64 * y]
        })
        .collect();
    let (outer, _) = lip_rings(pixels.len());
    rasterize_mouth(&mut img, &pixels[..outer], &pixels[outer..]);
    Ok(Tensor::new(vec![CHANNELS, IMAGE_SIZE, IMAGE_SIZE], img)?)
}

/// CHW floats in `[0, 1]` to interleaved RGB bytes.
pub fn frame_to_u8(img: &Tensor<f64>) -> Vec<u8> {
    let d = img.data();
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut out = Vec::with_capacity(CHANNELS * plane);
    for p in 0..plane {
        for ch in 0..CHANNELS {
            out.push((d[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Interleaved RGB bytes to CHW floats in `[0, 1]`.
pub fn u8_to_image(bytes: &[u8]) -> Tensor<f64> {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    Tensor::from_fn(vec![CHANNELS, IMAGE_SIZE, IMAGE_SIZE], |i| {
        let (ch, p) = (i / plane, i % plane);
        bytes[p * CHANNELS + ch] as f64 / 255.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face3dmm::{desk_basis, MOUTH_DIM};
    use crate::synthworld::sample_speaker;

    fn half_l1(a: &Tensor<f64>, b: &Tensor<f64>, lower: bool) -> f64 {
        let mut s = 0.0;
        for ch in 0..3 {
            for row in 0..IMAGE_SIZE {
                if (row >= HALF) != lower {
                    continue;
                }
                for col in 0..IMAGE_SIZE {
                    s += (a.at(&[ch, row, col]) - b.at(&[ch, row, col])).abs();
                }
            }
        }
        s
    }

    #[test]
    fn neutral_frame_is_stable_and_in_range() {
        let basis = desk_basis(0).unwrap();
        let s = sample_speaker(1);
        let a = render_frame(&s, &MouthParams::zeros(), [0.0; 3], &basis).unwrap();
        let b = render_frame(&s, &MouthParams::zeros(), [0.0; 3], &basis).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let lip_pixels = (HALF..IMAGE_SIZE)
            .flat_map(|r| (0..IMAGE_SIZE).map(move |c| (r, c)))
            .filter(|&(r, c)| (a.at(&[0, r, c]) - 0.72).abs() < 1e-9)
            .count();
        assert!(lip_pixels > 10, "neutral mouth should show lips, got {lip_pixels} pixels");
    }

    #[test]
    fn mouth_changes_only_lower_half() {
        let basis = desk_basis(0).unwrap();
        let s = sample_speaker(1);
        let mut open = [0.0; MOUTH_DIM];
        open[0] = 1.5;
        let a = render_frame(&s, &MouthParams::zeros(), [0.0; 3], &basis).unwrap();
        let b = render_frame(&s, &MouthParams(open), [0.0; 3], &basis).unwrap();
        assert!(half_l1(&a, &b, true) > 0.0);
        assert_eq!(half_l1(&a, &b, false), 0.0);
    }

    #[test]
    fn speakers_differ_in_upper_half() {
        let basis = desk_basis(0).unwrap();
        let a = render_frame(&sample_speaker(1), &MouthParams::zeros(), [0.0; 3], &basis).unwrap();
        let b = render_frame(&sample_speaker(2), &MouthParams::zeros(), [0.0; 3], &basis).unwrap();
        assert!(half_l1(&a, &b, false) > 0.0);
    }

    #[test]
    fn rotation_moves_mouth() {
        let basis = desk_basis(0).unwrap();
        let s = sample_speaker(1);
        let a = render_frame(&s, &MouthParams::zeros(), [0.0; 3], &basis).unwrap();
        let b = render_frame(&s, &MouthParams::zeros(), [0.0, 0.0, 0.1], &basis).unwrap();
        assert!(half_l1(&a, &b, true) > 0.0);
    }

    #[test]
    fn collinear_lips_draw_a_line() {
        let mut img = vec![0.5; CHANNELS * IMAGE_SIZE * IMAGE_SIZE];
        let outer: Vec<[f64; 2]> = (0..12).map(|i| [10.0 + i as f64, 24.3]).collect();
        rasterize_mouth(&mut img, &outer, &outer[..4]);
        let changed: Vec<usize> = (0..IMAGE_SIZE * IMAGE_SIZE).filter(|&p| img[p] != 0.5).collect();
        assert!(!changed.is_empty());
        assert!(changed.iter().all(|&p| p / IMAGE_SIZE == 24));
    }

    #[test]
    fn byte_conversion_round_trips() {
        let bytes: Vec<u8> = (0..CHANNELS * IMAGE_SIZE * IMAGE_SIZE).map(|i| (i * 7 % 256) as u8).collect();
        assert_eq!(frame_to_u8(&u8_to_image(&bytes)), bytes);
    }
}
