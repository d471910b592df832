//! Pinhole camera at the base station: projects the UAV into pixel
//! coordinates and renders it as a Gaussian intensity blob over a sky
//! gradient with illumination jitter and pixel noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::scene::{SceneConfig, UavState};
use crate::{Error, Result};

/// Camera intrinsics plus an upward pitch. The camera sits at the BS looking
/// along +x; `pitch_deg` tilts the optical axis up toward the flight volume.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub position: [f64; 3],
    pub pitch_deg: f64,
    /// Horizontal field of view, degrees. Vertical FOV follows from the
    /// aspect ratio (square pixels).
    pub fov_h_deg: f64,
    /// Blob radius in pixels at `blob_ref_dist` meters; scales as 1/distance.
    pub blob_sigma_px: f64,
    pub blob_ref_dist: f64,
    /// Illumination jitter: per-image brightness factor in `1 +- jitter`.
    pub illum_jitter: f64,
    /// Per-pixel additive noise sigma.
    pub pixel_noise: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            position: [0.0, 0.0, 0.0],
            pitch_deg: 30.0,
            fov_h_deg: 130.0,
            blob_sigma_px: 2.5,
            blob_ref_dist: 60.0,
            illum_jitter: 0.1,
            pixel_noise: 0.01,
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.fov_h_deg && self.fov_h_deg < 180.0) {
            return Err(Error::Config(format!(
                "camera.fov_h_deg must be in (0, 180), got {}",
                self.fov_h_deg
            )));
        }
        if self.blob_sigma_px <= 0.0 || self.blob_ref_dist <= 0.0 {
            return Err(Error::Config("camera blob parameters must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.illum_jitter) || self.pixel_noise < 0.0 {
            return Err(Error::Config("camera noise parameters out of range".into()));
        }
        if !(-90.0..90.0).contains(&self.pitch_deg) {
            return Err(Error::Config(format!("camera.pitch_deg out of range: {}", self.pitch_deg)));
        }
        Ok(())
    }

    fn focal_px(&self, width: usize) -> f64 {
        (width as f64 / 2.0) / (self.fov_h_deg.to_radians() / 2.0).tan()
    }

    /// Projects a world point to `(u, v, distance)`. `u` grows to the right
    /// (-y world), `v` grows downward (-z camera). Points behind the camera
    /// are a frustum error.
    pub fn project(&self, point: [f64; 3], width: usize, height: usize) -> Result<(f64, f64, f64)> {
        let d = [
            point[0] - self.position[0],
            point[1] - self.position[1],
            point[2] - self.position[2],
        ];
        let pitch = self.pitch_deg.to_radians();
        // Rotate about the y axis so the optical axis carries the pitch.
        let forward = pitch.cos() * d[0] + pitch.sin() * d[2];
        let up = -pitch.sin() * d[0] + pitch.cos() * d[2];
        let right = -d[1];
        if forward <= 1e-9 {
            return Err(Error::Geometry(format!(
                "point {point:?} is behind the camera plane"
            )));
        }
        let f = self.focal_px(width);
        let u = (width as f64 - 1.0) / 2.0 + f * right / forward;
        let v = (height as f64 - 1.0) / 2.0 - f * up / forward;
        let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        Ok((u, v, dist))
    }
}

/// Renders the `[3, H, W]` RGB view of the UAV, row-major planes, values in
/// `[0, 1]`. The UAV appears as a white Gaussian blob whose center is the
/// pinhole projection of its position and whose radius shrinks with distance.
pub fn render_image<R: Rng>(
    uav: &UavState,
    camera: &CameraConfig,
    scene: &SceneConfig,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let (u0, v0, dist) = camera.project(uav.position, width, height)?;
    let sigma = (camera.blob_sigma_px * camera.blob_ref_dist / dist).max(0.8);
    let illum = 1.0 + camera.illum_jitter * rng.gen_range(-1.0..1.0);

    let mut img = vec![0.0f64; 3 * height * width];
    let base = [0.10, 0.35, 0.75]; // sky tint per channel
    let horizon_fade = 0.5; // sky brightens toward the top of the frame
    for y in 0..height {
        let t = 1.0 - y as f64 / (height.max(2) - 1) as f64; // 1 at top
        for x in 0..width {
            let du = x as f64 - u0;
            let dv = y as f64 - v0;
            let blob = (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp();
            for (c, &b) in base.iter().enumerate() {
                let sky = b * (1.0 - horizon_fade + horizon_fade * t) * illum;
                let noise: f64 = if camera.pixel_noise > 0.0 {
                    let n: f64 = StandardNormal.sample(rng);
                    n * camera.pixel_noise
                } else {
                    0.0
                };
                let v = sky + (1.0 - sky) * blob + noise;
                img[c * height * width + y * width + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    let _ = scene; // scene reserved for future occluders
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quiet_camera() -> CameraConfig {
        CameraConfig {
            illum_jitter: 0.0,
            pixel_noise: 0.0,
            ..CameraConfig::default()
        }
    }

    fn uav_at(pos: [f64; 3]) -> UavState {
        UavState {
            position: pos,
            velocity: [0.0; 3],
            attitude: [0.0; 2],
            time_index: 0,
        }
    }

    /// Centroid of above-background intensity in the red channel: the sky is
    /// darkest in red, so the blob dominates after thresholding.
    fn blob_centroid(img: &[f64], h: usize, w: usize) -> (f64, f64) {
        let red = &img[0..h * w];
        let max = red.iter().cloned().fold(0.0f64, f64::max);
        let mean = red.iter().sum::<f64>() / red.len() as f64;
        let thr = mean + 0.5 * (max - mean);
        let (mut su, mut sv, mut sw) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let excess = (red[y * w + x] - thr).max(0.0);
                su += excess * x as f64;
                sv += excess * y as f64;
                sw += excess;
            }
        }
        (su / sw, sv / sw)
    }

    #[test]
    fn optical_axis_projects_to_image_center() {
        let cam = quiet_camera();
        let pitch = cam.pitch_deg.to_radians();
        // A point straight down the (pitched) optical axis.
        let p = [50.0 * pitch.cos(), 0.0, 50.0 * pitch.sin()];
        let (u, v, _) = cam.project(p, 64, 64).unwrap();
        assert!((u - 31.5).abs() < 1e-9 && (v - 31.5).abs() < 1e-9);
    }

    #[test]
    fn azimuth_change_shifts_blob_horizontally() {
        let cam = quiet_camera();
        let scene = SceneConfig::default();
        let el = 30f64.to_radians();
        let mk = |az: f64| {
            uav_at([
                60.0 * el.cos() * az.cos(),
                60.0 * el.cos() * az.sin(),
                60.0 * el.sin(),
            ])
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = render_image(&mk(-0.3), &cam, &scene, 64, 64, &mut rng).unwrap();
        let b = render_image(&mk(0.3), &cam, &scene, 64, 64, &mut rng).unwrap();
        let (ua, va) = blob_centroid(&a, 64, 64);
        let (ub, vb) = blob_centroid(&b, 64, 64);
        // +azimuth is +y world = left in the image.
        assert!(ua - ub > 5.0, "ua {ua}, ub {ub}");
        assert!((va - vb).abs() < 1.5, "va {va}, vb {vb}");
    }

    #[test]
    fn blob_centroid_matches_projection_within_one_pixel() {
        let cam = quiet_camera();
        let scene = SceneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (az, el, r) in [(0.1, 0.5, 50.0), (-0.4, 0.6, 80.0), (0.6, 0.4, 65.0)] {
            let uav = uav_at([
                r * f64::cos(el) * f64::cos(az),
                r * f64::cos(el) * f64::sin(az),
                r * f64::sin(el),
            ]);
            let (u, v, _) = cam.project(uav.position, 64, 64).unwrap();
            let img = render_image(&uav, &cam, &scene, 64, 64, &mut rng).unwrap();
            let (cu, cv) = blob_centroid(&img, 64, 64);
            assert!(
                (cu - u).abs() <= 1.0 && (cv - v).abs() <= 1.0,
                "centroid ({cu:.2},{cv:.2}) vs projected ({u:.2},{v:.2})"
            );
        }
    }

    #[test]
    fn behind_camera_is_frustum_error() {
        let cam = quiet_camera();
        assert!(matches!(
            cam.project([-10.0, 0.0, 5.0], 64, 64),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn pixel_values_stay_in_unit_range() {
        let cam = CameraConfig::default();
        let scene = SceneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = render_image(&uav_at([50.0, 10.0, 30.0]), &cam, &scene, 32, 32, &mut rng).unwrap();
        assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
