use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ImageTensor;

/// Seeded synthetic "sharp" image: a few low-frequency colored gratings as
/// background, overlaid with random rectangles and discs that provide
/// hard edges.
pub fn procedural_image(seed: u64, channels: usize, size: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a6e);
    let n = size as f32;

    struct Grating {
        fy: f32,
        fx: f32,
        phase: f32,
        amp: Vec<f32>,
    }
    let gratings: Vec<Grating> = (0..3)
        .map(|_| Grating {
            fy: rng.random_range(-3.0..3.0) / n,
            fx: rng.random_range(-3.0..3.0) / n,
            phase: rng.random_range(0.0..std::f32::consts::TAU),
            amp: (0..channels).map(|_| rng.random_range(0.04..0.12)).collect(),
        })
        .collect();
    let base: Vec<f32> = (0..channels).map(|_| rng.random_range(0.3..0.7)).collect();

    let mut img = ImageTensor::from_fn(channels, size, size, |c, y, x| {
        let mut v = base[c];
        for g in &gratings {
            let arg = std::f32::consts::TAU * (g.fy * y as f32 + g.fx * x as f32) + g.phase;
            v += g.amp[c] * arg.sin();
        }
        v
    });

    let shapes = rng.random_range(4..8);
    for _ in 0..shapes {
        let color: Vec<f32> = (0..channels).map(|_| rng.random_range(0.0..1.0)).collect();
        let cy = rng.random_range(0.0..n);
        let cx = rng.random_range(0.0..n);
        let ry = rng.random_range(n / 10.0..n / 3.5);
        let rx = rng.random_range(n / 10.0..n / 3.5);
        let disc = rng.random_bool(0.5);
        for c in 0..channels {
            for y in 0..size {
                for x in 0..size {
                    let (dy, dx) = ((y as f32 + 0.5 - cy) / ry, (x as f32 + 0.5 - cx) / rx);
                    let inside = if disc {
                        dy * dy + dx * dx <= 1.0
                    } else {
                        dy.abs() <= 1.0 && dx.abs() <= 1.0
                    };
                    if inside {
                        img.data_mut()[(c * size + y) * size + x] = color[c];
                    }
                }
            }
        }
    }
    // fine-grained texture
    for v in img.data_mut() {
        *v = (*v + rng.random_range(-0.01..0.01)).clamp(0.0, 1.0);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = procedural_image(3, 3, 32);
        assert_eq!(a, procedural_image(3, 3, 32));
        assert_ne!(a, procedural_image(4, 3, 32));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
