//! Line-of-sight ULA channels, the received-signal model, and the
//! codebook-gain beam oracle.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::codebook::{steering_vector, BeamCodebook};
use super::scene::UavState;
use crate::{Error, Result};

/// Radio parameters: array size M, subcarrier count K, codebook size Q,
/// transmit power P, and noise variance sigma^2.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RadioConfig {
    pub num_antennas: usize,
    pub num_subcarriers: usize,
    pub num_beams: usize,
    pub tx_power: f64,
    pub noise_var: f64,
    /// Power of an optional diffuse second path relative to the LoS path;
    /// 0 disables it.
    pub nlos_power_ratio: f64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            num_antennas: 16,
            num_subcarriers: 32,
            num_beams: 64,
            tx_power: 1.0,
            noise_var: 1e-3,
            nlos_power_ratio: 0.0,
        }
    }
}

impl RadioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_antennas == 0 || self.num_subcarriers == 0 || self.num_beams == 0 {
            return Err(Error::Config(
                "radio.num_antennas, num_subcarriers, num_beams must be positive".into(),
            ));
        }
        if !(self.tx_power > 0.0) || !(self.noise_var > 0.0) {
            return Err(Error::Config(format!(
                "radio.tx_power and noise_var must be positive, got {} / {}",
                self.tx_power, self.noise_var
            )));
        }
        if !(0.0..=10.0).contains(&self.nlos_power_ratio) {
            return Err(Error::Config(format!(
                "radio.nlos_power_ratio must be in [0,10], got {}",
                self.nlos_power_ratio
            )));
        }
        Ok(())
    }
}

/// Per-subcarrier channel vectors plus the dominant-path geometry that
/// produced them.
#[derive(Debug, Clone)]
pub struct ChannelState {
    pub per_subcarrier: Vec<Vec<Complex64>>,
    pub path_angle: f64,
    pub path_gain: Complex64,
}

/// Array response of a departing path toward `theta` under the transpose
/// gain convention `|h^T f|^2`: the conjugated steering vector, so the gain
/// peaks on the codebook beam aligned with `theta`.
fn path_response(m: usize, theta: f64) -> Vec<Complex64> {
    steering_vector(m, theta).into_iter().map(|v| v.conj()).collect()
}

/// Builds the channel between a fixed BS ULA and the UAV: a single LoS path
/// at the BS->UAV bearing, identical across all K subcarriers, with complex
/// gain of magnitude `1/distance` and uniform random phase. When
/// `nlos_power_ratio > 0`, one diffuse path at a random angle is added.
pub fn make_channel<R: Rng>(
    uav: &UavState,
    bs_position: [f64; 3],
    cfg: &RadioConfig,
    rng: &mut R,
) -> Result<ChannelState> {
    let d = [
        uav.position[0] - bs_position[0],
        uav.position[1] - bs_position[1],
        uav.position[2] - bs_position[2],
    ];
    let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if dist < 1e-9 {
        return Err(Error::Geometry("UAV coincides with the BS position".into()));
    }
    // Horizontal bearing off the array broadside (+x).
    let path_angle = d[1].atan2(d[0]);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let path_gain = Complex64::from_polar(1.0 / dist, phase);

    let mut h: Vec<Complex64> = path_response(cfg.num_antennas, path_angle)
        .into_iter()
        .map(|v| v * path_gain)
        .collect();

    if cfg.nlos_power_ratio > 0.0 {
        let nlos_angle = rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
        let nlos_phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let nlos_gain =
            Complex64::from_polar(cfg.nlos_power_ratio.sqrt() / dist, nlos_phase);
        for (hv, av) in h.iter_mut().zip(path_response(cfg.num_antennas, nlos_angle)) {
            *hv += av * nlos_gain;
        }
    }

    Ok(ChannelState {
        per_subcarrier: vec![h; cfg.num_subcarriers],
        path_angle,
        path_gain,
    })
}

/// Mean subcarrier gain of one beam: `(1/K) sum_k |h_k^T f|^2 * P/sigma^2`.
fn beam_gain(ch: &ChannelState, beam: &[Complex64], cfg: &RadioConfig) -> f64 {
    let k = ch.per_subcarrier.len() as f64;
    let sum: f64 = ch
        .per_subcarrier
        .iter()
        .map(|h| {
            h.iter()
                .zip(beam)
                .map(|(hv, fv)| hv * fv)
                .sum::<Complex64>()
                .norm_sqr()
        })
        .sum();
    sum / k * cfg.tx_power / cfg.noise_var
}

/// The beam-selection oracle: index of the codebook beam maximizing the mean
/// subcarrier gain, ties broken by the lowest index.
pub fn optimal_beam(ch: &ChannelState, cb: &BeamCodebook, cfg: &RadioConfig) -> usize {
    let mut best = 0;
    let mut best_gain = f64::NEG_INFINITY;
    for (q, beam) in cb.beams.iter().enumerate() {
        let g = beam_gain(ch, beam, cfg);
        if g > best_gain {
            best_gain = g;
            best = q;
        }
    }
    best
}

/// Baseband receive samples `y_k = h_k^T f x + v_k` with
/// `v_k ~ CN(0, sigma^2)`.
pub fn received_signal<R: Rng>(
    ch: &ChannelState,
    beam: &[Complex64],
    symbol: Complex64,
    cfg: &RadioConfig,
    rng: &mut R,
) -> Vec<Complex64> {
    let sigma = (cfg.noise_var / 2.0).sqrt();
    ch.per_subcarrier
        .iter()
        .map(|h| {
            let signal: Complex64 = h.iter().zip(beam).map(|(hv, fv)| hv * fv).sum::<Complex64>() * symbol;
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            signal + Complex64::new(re * sigma, im * sigma)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::airsim::codebook::dft_codebook;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uav_at(pos: [f64; 3]) -> UavState {
        UavState {
            position: pos,
            velocity: [0.0; 3],
            attitude: [0.0; 2],
            time_index: 0,
        }
    }

    fn cfg(m: usize, k: usize, q: usize) -> RadioConfig {
        RadioConfig {
            num_antennas: m,
            num_subcarriers: k,
            num_beams: q,
            ..RadioConfig::default()
        }
    }

    #[test]
    fn broadside_channel_is_proportional_to_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ch = make_channel(&uav_at([50.0, 0.0, 0.0]), [0.0; 3], &cfg(8, 4, 64), &mut rng).unwrap();
        assert!(ch.path_angle.abs() < 1e-12);
        let first = ch.per_subcarrier[0][0];
        for h in &ch.per_subcarrier {
            for v in h {
                assert!((v - first).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn doubling_distance_halves_gain_magnitude() {
        let c = cfg(8, 4, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = make_channel(&uav_at([30.0, 10.0, 20.0]), [0.0; 3], &c, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = make_channel(&uav_at([60.0, 20.0, 40.0]), [0.0; 3], &c, &mut rng).unwrap();
        assert!((a.path_gain.norm() - 2.0 * b.path_gain.norm()).abs() < 1e-12);
    }

    #[test]
    fn channel_norm_matches_k_m_gain() {
        let c = cfg(16, 8, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ch = make_channel(&uav_at([40.0, -25.0, 30.0]), [0.0; 3], &c, &mut rng).unwrap();
        let norm2: f64 = ch
            .per_subcarrier
            .iter()
            .flat_map(|h| h.iter())
            .map(|v| v.norm_sqr())
            .sum();
        let expect = (c.num_subcarriers * c.num_antennas) as f64 * ch.path_gain.norm_sqr();
        assert!((norm2 - expect).abs() < 1e-9 * expect);
    }

    #[test]
    fn zero_distance_is_a_geometry_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let err = make_channel(&uav_at([0.0; 3]), [0.0; 3], &cfg(4, 2, 8), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
    }

    #[test]
    fn single_antenna_ties_break_to_zero() {
        // M = 1: every beam has |f| = 1, all gains equal.
        let cb = dft_codebook(1, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cfg(1, 4, 8);
        let ch = make_channel(&uav_at([20.0, 5.0, 10.0]), [0.0; 3], &c, &mut rng).unwrap();
        assert_eq!(optimal_beam(&ch, &cb, &c), 0);
    }

    #[test]
    fn matched_conjugate_beam_wins() {
        // channel = conj(f_q) * c is the Cauchy-Schwarz maximizer of |h^T f|.
        let cb = dft_codebook(8, 32).unwrap();
        let c = cfg(8, 4, 32);
        for q in [0, 7, 16, 31] {
            let h: Vec<Complex64> = cb.beams[q].iter().map(|v| v.conj() * 2.5).collect();
            let ch = ChannelState {
                per_subcarrier: vec![h; 4],
                path_angle: cb.steering_angles[q],
                path_gain: Complex64::new(2.5, 0.0),
            };
            assert_eq!(optimal_beam(&ch, &cb, &c), q);
        }
    }

    #[test]
    fn los_channel_selects_nearest_grid_angle() {
        let c = cfg(16, 4, 64);
        let cb = dft_codebook(c.num_antennas, c.num_beams).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for i in 0..200 {
            let az: f64 = rng.gen_range(-1.2..1.2);
            let uav = uav_at([60.0 * az.cos(), 60.0 * az.sin(), 25.0]);
            let mut crng = ChaCha8Rng::seed_from_u64(100 + i);
            let ch = make_channel(&uav, [0.0; 3], &c, &mut crng).unwrap();
            let picked = optimal_beam(&ch, &cb, &c);
            assert_eq!(picked, cb.nearest_beam(ch.path_angle), "azimuth {az}");
        }
    }

    #[test]
    fn noiseless_receive_is_exact() {
        let c = RadioConfig {
            noise_var: 1e-300, // sigma ~ 0 without tripping validation
            ..cfg(8, 4, 32)
        };
        let cb = dft_codebook(8, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ch = make_channel(&uav_at([45.0, 12.0, 18.0]), [0.0; 3], &c, &mut rng).unwrap();
        let y = received_signal(&ch, &cb.beams[5], Complex64::new(1.0, 0.0), &c, &mut rng);
        for (yk, h) in y.iter().zip(&ch.per_subcarrier) {
            let expect: Complex64 = h.iter().zip(&cb.beams[5]).map(|(a, b)| a * b).sum();
            assert!((yk - expect).norm() < 1e-140);
        }
    }

    #[test]
    fn zero_symbol_noise_variance_matches_sigma2() {
        let c = cfg(4, 1, 8);
        let cb = dft_codebook(4, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ch = make_channel(&uav_at([30.0, 0.0, 10.0]), [0.0; 3], &c, &mut rng).unwrap();
        let n = 10_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let y = received_signal(&ch, &cb.beams[0], Complex64::new(0.0, 0.0), &c, &mut rng);
            acc += y[0].norm_sqr();
        }
        let empirical = acc / n as f64;
        assert!(
            (empirical - c.noise_var).abs() < 0.1 * c.noise_var,
            "empirical {empirical} vs {}",
            c.noise_var
        );
    }

    #[test]
    fn receive_is_linear_in_symbol() {
        let c = cfg(8, 4, 32);
        let cb = dft_codebook(8, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ch = make_channel(&uav_at([45.0, 12.0, 18.0]), [0.0; 3], &c, &mut rng).unwrap();
        // Same noise draw for both evaluations.
        let y1 = received_signal(&ch, &cb.beams[3], Complex64::new(1.0, 0.5), &c, &mut ChaCha8Rng::seed_from_u64(99));
        let y2 = received_signal(&ch, &cb.beams[3], Complex64::new(2.0, 1.0), &c, &mut ChaCha8Rng::seed_from_u64(99));
        let noise_free = |y: &[Complex64], x: Complex64| -> Vec<Complex64> {
            y.iter()
                .zip(&ch.per_subcarrier)
                .map(|(yk, h)| {
                    let s: Complex64 = h.iter().zip(&cb.beams[3]).map(|(a, b)| a * b).sum();
                    yk - s * x
                })
                .collect()
        };
        let n1 = noise_free(&y1, Complex64::new(1.0, 0.5));
        let n2 = noise_free(&y2, Complex64::new(2.0, 1.0));
        for (a, b) in n1.iter().zip(&n2) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
