//! Linearized error dynamics (`F`, `G`) and their discretization.
//!
//! Two discretizations are provided: the first-order closed form, which is
//! what the filter runs by default, and van Loan's augmented matrix
//! exponential, which is exact for a frozen `F` and serves as the reference.

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};

use crate::attitude::skew;
use crate::dynamics::{gamma, idx, ImuNoise, ImuSample, NavState, OrbitParams, STATE_DIM};
use crate::error::{Error, Result};

pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;
/// Noise input map, channels `(ε_a, ε_g, ε_b)`.
pub type NoiseMap = SMatrix<f64, STATE_DIM, 9>;

/// Continuous-time linear error model `δẋ = F δx + G ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub f: StateMatrix,
    pub g: NoiseMap,
}

/// One-step transition and process-noise covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteModel {
    pub phi: StateMatrix,
    pub q: StateMatrix,
    pub dt: f64,
}

/// Which discretization the filter uses for `Φ_k`, `Q_k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Discretization {
    /// `Φ ≈ I + F t`, `Q` from the closed-form block expressions.
    #[default]
    ClosedForm,
    /// Augmented matrix exponential.
    VanLoan,
}

impl std::str::FromStr for Discretization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed_form" => Ok(Self::ClosedForm),
            "van_loan" => Ok(Self::VanLoan),
            other => Err(Error::Config(format!(
                "unknown discretization '{other}' (expected closed_form or van_loan)"
            ))),
        }
    }
}

impl std::fmt::Display for Discretization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ClosedForm => "closed_form",
            Self::VanLoan => "van_loan",
        })
    }
}

fn set_block(m: &mut StateMatrix, row: usize, col: usize, b: &Matrix3<f64>) {
    m.fixed_view_mut::<3, 3>(row, col).copy_from(b);
}

/// Error-state Jacobian about `x̄` with inputs `u`.
///
/// Block rows in state order `(r, ṙ, q̃_v, b_g, b_a, ϱ₁, ϱ₂)`:
///
/// ```text
/// ṙ   : [0, I, 0, 0, 0, 0, 0]
/// r̈   : [Γ, −2n[k×], −2Ā[(û_a+b̂_a)×], 0, Ā, 0, 0]
/// q̃̇_v : [0, 0, −[(û_g+b̂_g)×], ½I, 0, 0, 0]
/// ```
///
/// and zero rows for every parameter.
pub fn build_f(x_bar: &NavState, u: &ImuSample, orbit: &OrbitParams) -> StateMatrix {
    let a_bar = x_bar.q_ref.dcm();
    let accel = u.u_a + x_bar.b_a;
    let omega = u.u_g + x_bar.b_g;
    let mut f = StateMatrix::zeros();
    set_block(&mut f, idx::R, idx::V, &Matrix3::identity());
    set_block(&mut f, idx::V, idx::R, &gamma(orbit));
    set_block(&mut f, idx::V, idx::V, &(skew(&Vector3::z()) * (-2.0 * orbit.n)));
    set_block(&mut f, idx::V, idx::Q, &(a_bar * skew(&accel) * -2.0));
    set_block(&mut f, idx::V, idx::BA, &a_bar);
    set_block(&mut f, idx::Q, idx::Q, &(-skew(&omega)));
    set_block(&mut f, idx::Q, idx::BG, &(Matrix3::identity() * 0.5));
    f
}

/// Noise input map: `Ā` on `ε_a` into `r̈`, `½I` on `ε_g` into `q̃̇_v`, `I` on `ε_b` into `ḃ_g`.
pub fn build_g(q_bar: &crate::attitude::Quaternion) -> NoiseMap {
    let mut g = NoiseMap::zeros();
    g.fixed_view_mut::<3, 3>(idx::V, 0).copy_from(&q_bar.dcm());
    g.fixed_view_mut::<3, 3>(idx::Q, 3)
        .copy_from(&(Matrix3::identity() * 0.5));
    g.fixed_view_mut::<3, 3>(idx::BG, 6)
        .copy_from(&Matrix3::identity());
    g
}

pub fn linear_model(x_bar: &NavState, u: &ImuSample, orbit: &OrbitParams) -> LinearModel {
    LinearModel {
        f: build_f(x_bar, u, orbit),
        g: build_g(&x_bar.q_ref),
    }
}

/// Continuous noise intensity mapped into the state, `G Σ_IMU Gᵀ`, plus the
/// optional accelerometer-bias pseudo-walk on the `b_a` block.
pub fn noise_intensity(g: &NoiseMap, noise: &ImuNoise) -> StateMatrix {
    let mut sigma = SMatrix::<f64, 9, 9>::zeros();
    for i in 0..3 {
        sigma[(i, i)] = noise.sigma_a * noise.sigma_a;
        sigma[(3 + i, 3 + i)] = noise.sigma_g * noise.sigma_g;
        sigma[(6 + i, 6 + i)] = noise.sigma_b * noise.sigma_b;
    }
    let mut s = g * sigma * g.transpose();
    for i in 0..3 {
        s[(idx::BA + i, idx::BA + i)] += noise.sigma_ba * noise.sigma_ba;
    }
    s
}

/// `Φ ≈ I + t F`.
pub fn phi_first_order(f: &StateMatrix, dt: f64) -> StateMatrix {
    StateMatrix::identity() + f * dt
}

/// Closed-form process-noise covariance over one step.
///
/// Blocks as indexed by `(r, ṙ, q̃_v, b_g)`, with `a = û_a + b̂_a`,
/// `ω = û_g + b̂_g`, `K = [k×]`:
///
/// ```text
/// Q11 = ⅓σ_a²t³ I
/// Q12 = σ_a²(½t² I + ⅔t³ n K)
/// Q22 = σ_a²(t I − 4/3 t³ n² K²) + ⅓σ_b²t³ I − ⅓σ_g²t³ Ā[a×]²Āᵀ
/// Q23 = σ_g² Ā(⅙t³[a×][ω×] + ¼t[a×])
/// Q24 = ¼σ_b²t² Ā
/// Q33 = σ_g²(¼t I − 1/12 t³[ω×]²)
/// Q44 = σ_b² t I
/// ```
///
/// reproduced as printed, mirrored into the lower triangle and symmetrized.
/// `Q23`'s `¼t` term and the `σ_b²` entries in `Q22`, `Q24` do not follow
/// from `F` above; compare against [`van_loan`] before relying on them.
pub fn q_closed_form(
    x_bar: &NavState,
    u: &ImuSample,
    noise: &ImuNoise,
    orbit: &OrbitParams,
    dt: f64,
) -> Result<StateMatrix> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let t = dt;
    let (t2, t3) = (t * t, t * t * t);
    let sa2 = noise.sigma_a * noise.sigma_a;
    let sg2 = noise.sigma_g * noise.sigma_g;
    let sb2 = noise.sigma_b * noise.sigma_b;
    let n = orbit.n;
    let i3 = Matrix3::identity();
    let k = skew(&Vector3::z());
    let a_bar = x_bar.q_ref.dcm();
    let ax = skew(&(u.u_a + x_bar.b_a));
    let wx = skew(&(u.u_g + x_bar.b_g));

    let q11 = i3 * (sa2 * t3 / 3.0);
    let q12 = (i3 * (0.5 * t2) + k * (2.0 / 3.0 * t3 * n)) * sa2;
    let q22 = (i3 * t - k * k * (4.0 / 3.0 * t3 * n * n)) * sa2 + i3 * (sb2 * t3 / 3.0)
        - a_bar * ax * ax * a_bar.transpose() * (sg2 * t3 / 3.0);
    let q23 = a_bar * (ax * wx * (t3 / 6.0) + ax * (0.25 * t)) * sg2;
    let q24 = a_bar * (0.25 * sb2 * t2);
    let q33 = (i3 * (0.25 * t) - wx * wx * (t3 / 12.0)) * sg2;
    let q44 = i3 * (sb2 * t);

    let mut q = StateMatrix::zeros();
    let upper = [
        (idx::R, idx::R, q11),
        (idx::R, idx::V, q12),
        (idx::V, idx::V, q22),
        (idx::V, idx::Q, q23),
        (idx::V, idx::BG, q24),
        (idx::Q, idx::Q, q33),
        (idx::BG, idx::BG, q44),
    ];
    for (r, c, b) in upper {
        set_block(&mut q, r, c, &b);
        if r != c {
            set_block(&mut q, c, r, &b.transpose());
        }
    }
    let ba2 = noise.sigma_ba * noise.sigma_ba;
    for i in 0..3 {
        q[(idx::BA + i, idx::BA + i)] += ba2 * t;
    }
    Ok((q + q.transpose()) * 0.5)
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring around a truncated Taylor core.
///
/// The argument is scaled to 1-norm ≤ ½ and the series is summed until the
/// next term is below 1e-18 of the partial sum, which keeps the relative
/// error near machine precision for the small arguments used here.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::InvalidArgument("expm needs a square matrix".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entry in matrix exponential argument".into()));
    }
    let dim = a.nrows();
    let nrm = norm1(a);
    let squarings = if nrm > 0.5 {
        (nrm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings);
    let mut sum = DMatrix::<f64>::identity(dim, dim);
    let mut term = DMatrix::<f64>::identity(dim, dim);
    for k in 1..=40 {
        term = &term * &scaled / k as f64;
        sum += &term;
        if norm1(&term) <= 1e-18 * norm1(&sum) {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    if sum.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix exponential overflowed".into()));
    }
    Ok(sum)
}

/// Van Loan discretization for arbitrary dimension.
///
/// Builds `Λ = [[−F, S], [0, Fᵀ]]`, `Ψ = e^{Λt}`, and returns
/// `(Φ, Q) = (Ψ₂₂ᵀ, Ψ₂₂ᵀ Ψ₁₂)` with `Q` symmetrized.
pub fn van_loan_dense(
    f: &DMatrix<f64>,
    s: &DMatrix<f64>,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let n = f.nrows();
    let mut lambda = DMatrix::<f64>::zeros(2 * n, 2 * n);
    lambda.view_mut((0, 0), (n, n)).copy_from(&(-f));
    lambda.view_mut((0, n), (n, n)).copy_from(s);
    lambda.view_mut((n, n), (n, n)).copy_from(&f.transpose());
    let psi = expm(&(lambda * dt))?;
    let phi = psi.view((n, n), (n, n)).transpose();
    let q = &phi * psi.view((0, n), (n, n));
    let q = (&q + q.transpose()) * 0.5;
    Ok((phi, q))
}

/// Van Loan discretization of the 21-state model.
pub fn van_loan(
    f: &StateMatrix,
    g: &NoiseMap,
    noise: &ImuNoise,
    dt: f64,
) -> Result<DiscreteModel> {
    let s = noise_intensity(g, noise);
    let (phi, q) = van_loan_dense(
        &DMatrix::from_column_slice(STATE_DIM, STATE_DIM, f.as_slice()),
        &DMatrix::from_column_slice(STATE_DIM, STATE_DIM, s.as_slice()),
        dt,
    )?;
    Ok(DiscreteModel {
        phi: StateMatrix::from_column_slice(phi.as_slice()),
        q: StateMatrix::from_column_slice(q.as_slice()),
        dt,
    })
}

/// `Φ_k`, `Q_k` about `x̄` for one propagation interval.
pub fn discretize(
    x_bar: &NavState,
    u: &ImuSample,
    noise: &ImuNoise,
    orbit: &OrbitParams,
    dt: f64,
    method: Discretization,
) -> Result<DiscreteModel> {
    let f = build_f(x_bar, u, orbit);
    match method {
        Discretization::ClosedForm => Ok(DiscreteModel {
            phi: phi_first_order(&f, dt),
            q: q_closed_form(x_bar, u, noise, orbit, dt)?,
            dt,
        }),
        Discretization::VanLoan => van_loan(&f, &build_g(&x_bar.q_ref), noise, dt),
    }
}
