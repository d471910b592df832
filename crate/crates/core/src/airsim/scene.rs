//! UAV states and the sampled flight volume.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One time instant of the UAV: position/velocity in the local Cartesian
/// frame (meters, BS at the origin), pitch/yaw attitude (radians).
#[derive(Debug, Clone, PartialEq)]
pub struct UavState {
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    pub attitude: [f64; 2],
    pub time_index: u64,
}

impl UavState {
    /// The 8 structured sensor values in wire order: position, velocity,
    /// pitch, yaw.
    pub fn struct_vec(&self) -> [f64; 8] {
        [
            self.position[0],
            self.position[1],
            self.position[2],
            self.velocity[0],
            self.velocity[1],
            self.velocity[2],
            self.attitude[0],
            self.attitude[1],
        ]
    }
}

/// Flight volume and sensor-noise parameters. The volume is expressed in
/// BS-centric spherical terms — range, bearing off the array broadside,
/// elevation — which keeps the camera frustum and the beam grid coverage easy
/// to reason about.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub bs_position: [f64; 3],
    pub range_min: f64,
    pub range_max: f64,
    /// Max |bearing| off broadside, degrees. Controls how many codebook
    /// beams the label distribution can reach.
    pub azimuth_max_deg: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub speed_max: f64,
    /// Gaussian sensor noise applied to the structured vector.
    pub noise_pos_sigma: f64,
    pub noise_vel_sigma: f64,
    pub noise_att_sigma_deg: f64,
    pub image_size: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            bs_position: [0.0, 0.0, 0.0],
            range_min: 40.0,
            range_max: 100.0,
            azimuth_max_deg: 60.0,
            elevation_min_deg: 10.0,
            elevation_max_deg: 50.0,
            speed_max: 10.0,
            noise_pos_sigma: 1.0,
            noise_vel_sigma: 0.1,
            noise_att_sigma_deg: 0.5,
            image_size: 64,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.range_min > 0.0 && self.range_max > self.range_min) {
            return Err(Error::Config(format!(
                "scene range must satisfy 0 < range_min < range_max, got {} / {}",
                self.range_min, self.range_max
            )));
        }
        if !(0.0 < self.azimuth_max_deg && self.azimuth_max_deg < 90.0) {
            return Err(Error::Config(format!(
                "scene.azimuth_max_deg must be in (0, 90), got {}",
                self.azimuth_max_deg
            )));
        }
        if !(0.0 <= self.elevation_min_deg
            && self.elevation_min_deg < self.elevation_max_deg
            && self.elevation_max_deg < 90.0)
        {
            return Err(Error::Config(format!(
                "scene elevation range invalid: {} .. {}",
                self.elevation_min_deg, self.elevation_max_deg
            )));
        }
        if self.speed_max < 0.0 {
            return Err(Error::Config("scene.speed_max must be non-negative".into()));
        }
        if self.noise_pos_sigma < 0.0 || self.noise_vel_sigma < 0.0 || self.noise_att_sigma_deg < 0.0 {
            return Err(Error::Config("scene sensor noise sigmas must be non-negative".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Config("scene.image_size must be positive".into()));
        }
        Ok(())
    }
}

/// Draws a random airborne state inside the configured volume. Position is
/// uniform in (range, bearing, elevation); velocity is a random direction at
/// uniform speed; attitude angles are small random pitch/yaw.
pub fn sample_uav_state<R: Rng>(scene: &SceneConfig, time_index: u64, rng: &mut R) -> UavState {
    let r = rng.gen_range(scene.range_min..scene.range_max);
    let az = rng
        .gen_range(-scene.azimuth_max_deg..scene.azimuth_max_deg)
        .to_radians();
    let el = rng
        .gen_range(scene.elevation_min_deg..scene.elevation_max_deg)
        .to_radians();
    let position = [
        scene.bs_position[0] + r * el.cos() * az.cos(),
        scene.bs_position[1] + r * el.cos() * az.sin(),
        scene.bs_position[2] + r * el.sin(),
    ];
    let speed = rng.gen_range(0.0..=scene.speed_max);
    let dir_az = rng.gen_range(0.0..std::f64::consts::TAU);
    let dir_el: f64 = rng.gen_range(-0.5..0.5);
    let velocity = [
        speed * dir_el.cos() * dir_az.cos(),
        speed * dir_el.cos() * dir_az.sin(),
        speed * dir_el.sin(),
    ];
    let attitude = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.5..0.5)];
    UavState {
        position,
        velocity,
        attitude,
        time_index,
    }
}

/// Applies Gaussian sensor noise to the true state, producing the 8-dim
/// structured vector a GPS/IMU stack would report.
pub fn noisy_struct_vec<R: Rng>(state: &UavState, scene: &SceneConfig, rng: &mut R) -> [f64; 8] {
    let mut v = state.struct_vec();
    let att_sigma = scene.noise_att_sigma_deg.to_radians();
    let sigmas = [
        scene.noise_pos_sigma,
        scene.noise_pos_sigma,
        scene.noise_pos_sigma,
        scene.noise_vel_sigma,
        scene.noise_vel_sigma,
        scene.noise_vel_sigma,
        att_sigma,
        att_sigma,
    ];
    for (x, s) in v.iter_mut().zip(sigmas) {
        let n: f64 = StandardNormal.sample(rng);
        *x += n * s;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sampled_states_stay_in_volume() {
        let scene = SceneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in 0..200 {
            let s = sample_uav_state(&scene, t, &mut rng);
            let d = s.position;
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            assert!(r >= scene.range_min && r <= scene.range_max);
            assert!(d[2] > 0.0, "airborne");
            let az = d[1].atan2(d[0]).to_degrees();
            assert!(az.abs() <= scene.azimuth_max_deg + 1e-9);
        }
    }

    #[test]
    fn zero_noise_reports_exact_state() {
        let scene = SceneConfig {
            noise_pos_sigma: 0.0,
            noise_vel_sigma: 0.0,
            noise_att_sigma_deg: 0.0,
            ..SceneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sample_uav_state(&scene, 0, &mut rng);
        assert_eq!(noisy_struct_vec(&s, &scene, &mut rng), s.struct_vec());
    }
}
