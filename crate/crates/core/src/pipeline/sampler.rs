//! Euler integration of the rectified-flow ODE.

use ndarray::Array2;

use crate::attention::ShareSpec;
use crate::model::{AttentionBank, ModelError, ShareContext, ToyMMDiT};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// Anything that predicts a velocity for a latent at a grid point.
pub trait VelocityField<T> {
    fn velocity(&self, z: &Array2<T>, sigma: T, step: usize) -> Result<Array2<T>, ModelError>;
}

/// Integrates from `z_init` at `σ = sigmas[0]` to `sigmas[N]`:
/// `z ← z + (σ_{i+1} − σ_i) · v(z, σ_i)`.
pub fn euler_sample<T: Scalar, F: VelocityField<T> + ?Sized>(
    field: &F,
    z_init: Array2<T>,
    schedule: &NoiseSchedule<T>,
) -> Result<Array2<T>, ModelError> {
    let mut z = z_init;
    for (i, w) in schedule.sigmas.windows(2).enumerate() {
        let v = field.velocity(&z, w[0], i)?;
        if v.dim() != z.dim() {
            return Err(ModelError::Shape(format!("velocity {:?} vs latent {:?}", v.dim(), z.dim())));
        }
        z.scaled_add(w[1] - w[0], &v);
    }
    Ok(z)
}

/// The toy model bound to a prompt, guidance and optional reference bank.
pub struct ModelField<'a, T> {
    pub model: &'a ToyMMDiT<T>,
    pub prompt: &'a Array2<T>,
    pub guidance: T,
    pub share: Option<(&'a ShareSpec, &'a AttentionBank<T>)>,
}

impl<T: Scalar> VelocityField<T> for ModelField<'_, T> {
    fn velocity(&self, z: &Array2<T>, sigma: T, step: usize) -> Result<Array2<T>, ModelError> {
        let share = self.share.map(|(spec, bank)| ShareContext { spec, bank, timestep_index: step });
        self.model.forward_velocity(z, sigma, self.prompt, self.guidance, share)
    }
}
