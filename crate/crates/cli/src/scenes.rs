//! Procedural clean scenes for toy datasets: smooth gradients with a few
//! soft-edged shapes, bright enough to survive division by the exposure
//! ratio.

use darklift_core::isp::{ColorState, ImagePlane};
use darklift_core::rng::Rng;

fn soft_step(d: f32, radius: f32, softness: f32) -> f32 {
    // 1 inside, 0 outside, linear ramp of width `softness`
    ((radius - d) / softness + 0.5).clamp(0.0, 1.0)
}

/// Generate one synthetic sRGB scene.
pub fn generate_scene(rng: &mut Rng, side: usize) -> ImagePlane {
    let n = side * side;
    let mut data = vec![0.0f32; 3 * n];

    // gradient background between two colors
    let c0: [f32; 3] = [
        0.25 + 0.5 * rng.next_f32(),
        0.25 + 0.5 * rng.next_f32(),
        0.25 + 0.5 * rng.next_f32(),
    ];
    let c1: [f32; 3] = [
        0.25 + 0.5 * rng.next_f32(),
        0.25 + 0.5 * rng.next_f32(),
        0.25 + 0.5 * rng.next_f32(),
    ];
    let horizontal = rng.next_f32() < 0.5;
    for y in 0..side {
        for x in 0..side {
            let t = if horizontal {
                x as f32 / (side - 1) as f32
            } else {
                y as f32 / (side - 1) as f32
            };
            for c in 0..3 {
                data[c * n + y * side + x] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    // a few blobs and rectangles
    let shapes = 3 + rng.next_below(4);
    for _ in 0..shapes {
        let color: [f32; 3] = [rng.next_f32(), rng.next_f32(), rng.next_f32()];
        let cx = rng.next_f32() * side as f32;
        let cy = rng.next_f32() * side as f32;
        if rng.next_f32() < 0.5 {
            // soft disc
            let radius = (0.08 + 0.17 * rng.next_f32()) * side as f32;
            let softness = 1.0 + 0.1 * side as f32 * rng.next_f32();
            for y in 0..side {
                for x in 0..side {
                    let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                    let a = soft_step(d, radius, softness);
                    if a > 0.0 {
                        for c in 0..3 {
                            let px = &mut data[c * n + y * side + x];
                            *px = *px * (1.0 - a) + color[c] * a;
                        }
                    }
                }
            }
        } else {
            // axis-aligned rectangle with a 1px soft border
            let w = (0.1 + 0.3 * rng.next_f32()) * side as f32;
            let h = (0.1 + 0.3 * rng.next_f32()) * side as f32;
            for y in 0..side {
                for x in 0..side {
                    let dx = (x as f32 - cx).abs() - w / 2.0;
                    let dy = (y as f32 - cy).abs() - h / 2.0;
                    let a = soft_step(dx.max(dy), 0.0, 1.5);
                    if a > 0.0 {
                        for c in 0..3 {
                            let px = &mut data[c * n + y * side + x];
                            *px = *px * (1.0 - a) + color[c] * a;
                        }
                    }
                }
            }
        }
    }

    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    ImagePlane {
        width: side,
        height: side,
        channels: 3,
        data,
        color_state: ColorState::Srgb,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_reproducible_and_in_range() {
        let a = generate_scene(&mut Rng::new(5), 32);
        let b = generate_scene(&mut Rng::new(5), 32);
        assert_eq!(a.data, b.data);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        // scenes carry some structure
        let mean = a.data.iter().sum::<f32>() / a.data.len() as f32;
        let var = a
            .data
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f32>()
            / a.data.len() as f32;
        assert!(var > 1e-3, "scene is flat: var {var}");
    }
}
