//! Synthetic air-to-ground scene and channel simulator.
//!
//! Stands in for a hardware capture rig: a base station with an M-element
//! half-wavelength ULA and a pinhole RGB camera observes a UAV flying through
//! a configurable volume. Each generated sample pairs a rendered image and a
//! noisy 8-dim GPS/IMU vector with the ground-truth optimal beam index,
//! computed by maximizing the mean per-subcarrier codebook gain on the
//! sample's own channel.

mod camera;
mod channel;
mod codebook;
mod dataset;
mod scene;

pub use camera::{render_image, CameraConfig};
pub use channel::{make_channel, optimal_beam, received_signal, ChannelState, RadioConfig};
pub use codebook::{dft_codebook, steering_vector, BeamCodebook};
pub use dataset::{
    generate_dataset, load_dataset, save_dataset, Dataset, Manifest, Sample, DATASET_FORMAT_VERSION,
};
pub use scene::{sample_uav_state, SceneConfig, UavState};
