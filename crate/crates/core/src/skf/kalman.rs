//! Single-model Kalman predict/update on the 4-dim position/velocity state.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Vector2, Vector4};

use super::{Observation, SkfError, StateEstimate};

/// Position-only observation matrix.
pub fn observation_matrix() -> Matrix2x4<f64> {
    Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)
}

pub(crate) fn symmetrize4(m: &Matrix4<f64>) -> Matrix4<f64> {
    (m + m.transpose()) * 0.5
}

fn check_finite(s: &StateEstimate) -> Result<(), SkfError> {
    if s.mean.iter().chain(s.cov.iter()).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SkfError::NonFiniteState)
    }
}

/// `mean ← F·mean`, `cov ← F·cov·Fᵀ + Q`.
pub fn kf_predict(
    s: &StateEstimate,
    f: &Matrix4<f64>,
    q: &Matrix4<f64>,
) -> Result<StateEstimate, SkfError> {
    let out = StateEstimate {
        mean: f * s.mean,
        cov: symmetrize4(&(f * s.cov * f.transpose() + q)),
    };
    check_finite(&out)?;
    Ok(out)
}

/// Gaussian log-density of innovation `nu` under covariance `s`.
pub(crate) fn gaussian_log_density(nu: &Vector2<f64>, s: &Matrix2<f64>) -> Result<f64, SkfError> {
    let det = s.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return Err(SkfError::SingularInnovation);
    }
    let s_inv = s.try_inverse().ok_or(SkfError::SingularInnovation)?;
    let maha = (nu.transpose() * s_inv * nu)[(0, 0)];
    Ok(-0.5 * (maha + det.ln() + 2.0 * (2.0 * std::f64::consts::PI).ln()))
}

/// Kalman measurement update with the Joseph-form covariance.
///
/// Returns the posterior and `log N(z; H·mean, S)`.
pub fn kf_update(
    s: &StateEstimate,
    obs: &Observation,
    h: &Matrix2x4<f64>,
) -> Result<(StateEstimate, f64), SkfError> {
    let innovation_cov = h * s.cov * h.transpose() + obs.r;
    let innovation_cov = (innovation_cov + innovation_cov.transpose()) * 0.5;
    let nu = obs.z - h * s.mean;
    let log_likelihood = gaussian_log_density(&nu, &innovation_cov)?;
    let s_inv = innovation_cov
        .try_inverse()
        .ok_or(SkfError::SingularInnovation)?;
    let gain = s.cov * h.transpose() * s_inv;
    let i_kh = Matrix4::identity() - gain * h;
    let cov = i_kh * s.cov * i_kh.transpose() + gain * obs.r * gain.transpose();
    let out = StateEstimate {
        mean: s.mean + gain * nu,
        cov: symmetrize4(&cov),
    };
    check_finite(&out)?;
    Ok((out, log_likelihood))
}

/// One backward Rauch–Tung–Striebel step.
///
/// `filtered` is the estimate at `t`, `smoothed_next` the smoothed estimate at
/// `t+1`, and `f`/`q` the dynamics used between them.
pub fn rts_step(
    filtered: &StateEstimate,
    smoothed_next: &StateEstimate,
    f: &Matrix4<f64>,
    q: &Matrix4<f64>,
) -> Result<StateEstimate, SkfError> {
    let pred_mean: Vector4<f64> = f * filtered.mean;
    let pred_cov = symmetrize4(&(f * filtered.cov * f.transpose() + q));
    let pred_inv = match pred_cov.cholesky() {
        Some(ch) => ch.inverse(),
        None => pred_cov.try_inverse().ok_or(SkfError::NonFiniteState)?,
    };
    let gain = filtered.cov * f.transpose() * pred_inv;
    let out = StateEstimate {
        mean: filtered.mean + gain * (smoothed_next.mean - pred_mean),
        cov: symmetrize4(&(filtered.cov + gain * (smoothed_next.cov - pred_cov) * gain.transpose())),
    };
    check_finite(&out)?;
    Ok(out)
}
