//! ULA steering vectors and the DFT-grid beam codebook.

use num_complex::Complex64;

use crate::{Error, Result};

/// Far-field response of an M-element half-wavelength ULA toward angle
/// `theta` (radians off broadside): element `m` carries phase `pi*m*sin(theta)`.
/// The squared norm is exactly `M`.
pub fn steering_vector(m: usize, theta: f64) -> Vec<Complex64> {
    let s = theta.sin();
    (0..m)
        .map(|i| Complex64::from_polar(1.0, std::f64::consts::PI * i as f64 * s))
        .collect()
}

/// A codebook of Q unit-norm candidate beams over an M-element ULA, with
/// steering angles strictly increasing in sin-space.
#[derive(Debug, Clone)]
pub struct BeamCodebook {
    pub num_beams: usize,
    pub num_antennas: usize,
    pub beams: Vec<Vec<Complex64>>,
    pub steering_angles: Vec<f64>,
}

impl BeamCodebook {
    /// The grid-point sines, `sin(theta_q) = -1 + 2q/Q`.
    pub fn grid_sines(&self) -> Vec<f64> {
        self.steering_angles.iter().map(|a| a.sin()).collect()
    }

    /// Index of the beam whose grid sine is nearest `sin(theta)`; lower index
    /// wins exact midpoints.
    pub fn nearest_beam(&self, theta: f64) -> usize {
        let s = theta.sin();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (q, angle) in self.steering_angles.iter().enumerate() {
            let d = (angle.sin() - s).abs();
            if d < best_d {
                best_d = d;
                best = q;
            }
        }
        best
    }
}

/// Oversampled DFT-style codebook: beam `q` is the unit-norm steering vector
/// at `sin(theta_q) = -1 + 2q/Q`, uniform over `[-1, 1)`.
pub fn dft_codebook(num_antennas: usize, num_beams: usize) -> Result<BeamCodebook> {
    if num_antennas == 0 || num_beams == 0 {
        return Err(Error::Config(format!(
            "codebook needs positive dimensions, got M={num_antennas}, Q={num_beams}"
        )));
    }
    let norm = 1.0 / (num_antennas as f64).sqrt();
    let mut beams = Vec::with_capacity(num_beams);
    let mut steering_angles = Vec::with_capacity(num_beams);
    for q in 0..num_beams {
        let s = -1.0 + 2.0 * q as f64 / num_beams as f64;
        let theta = s.asin();
        let beam = steering_vector(num_antennas, theta)
            .into_iter()
            .map(|v| v * norm)
            .collect();
        beams.push(beam);
        steering_angles.push(theta);
    }
    Ok(BeamCodebook {
        num_beams,
        num_antennas,
        beams,
        steering_angles,
    })
}
