//! Compositional adversarial robustness laboratory: ℓ∞ and rotation/translation
//! threat models, the attacks and TRADES-style defenses built on them, and a
//! synthetic linear setting where robust accuracy has a closed form.

pub mod analysis;
pub mod attacks;
pub mod autodiff;
pub mod datasets;
pub mod image;
pub mod models;
pub mod rng;
pub mod spatial;
pub mod tensor;
pub mod theory;
pub mod trades;

pub use image::{Image, ImageShape};
pub use models::{Architecture, Logits, Model};
pub use rng::RngStream;
pub use spatial::{AffineParams, ThreatBudget};
pub use tensor::Tensor;
