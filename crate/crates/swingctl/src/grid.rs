//! Grid description, network Laplacian and per-mode system matrices.
//!
//! The model is the small-signal swing equation over an undirected graph
//! of buses, with lumped droop/damping per bus and a per-mode diagonal
//! inertia matrix. Stacking angle and frequency deviations `x = (θ, ω)`
//! gives one continuous pair per inertia mode
//!
//! ```text
//! A_q = [ 0        I      ]      B_q = [ 0      ]
//!       [ -M_q⁻¹L  -M_q⁻¹D ]           [ M_q⁻¹ ]
//! ```
//!
//! plus its exact zero-order-hold discretization at the control step.
//! Angles are in radians, frequencies in per-unit of the nominal grid
//! frequency; Hz values appear only at I/O boundaries.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{expm, SymMatrix};

/// Per-bus parameters: droop/damping coefficient and rated power, both in
/// per-unit on the system base.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusParams {
    pub damping: f64,
    #[serde(default = "default_rated_power")]
    pub rated_power: f64,
}

fn default_rated_power() -> f64 {
    1.0
}

/// Transmission line between two buses (1-based ids). Only the reactance
/// enters the model: lines are treated as purely inductive and the
/// resistive part is ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub from: usize,
    pub to: usize,
    pub reactance_pu: f64,
    #[serde(default)]
    pub resistance_pu: f64,
}

impl EdgeSpec {
    /// Line susceptance `b = 1/x` in per-unit.
    pub fn susceptance(&self) -> f64 {
        1.0 / self.reactance_pu
    }
}

/// Inertia-mode configuration: the ladder of inertia constants (seconds)
/// and whether every bus shares the mode's normalized inertia directly
/// (`m = h`) instead of the rated-power scaling `m_i = 2 h S_i / ω_s`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeConfig {
    pub inertia_s: Vec<f64>,
    pub uniform: bool,
}

/// Declarative grid description, deserialized from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub nominal_freq_hz: f64,
    pub buses: Vec<BusParams>,
    pub edges: Vec<EdgeSpec>,
    pub modes: ModeConfig,
}

impl GridSpec {
    pub fn from_json(text: &str) -> Result<GridSpec> {
        let spec: GridSpec = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<grid spec>".into(),
            message: format!("{e} (line {}, column {})", e.line(), e.column()),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    /// Bundled 12-bus, 3-area default network: three rings of four buses
    /// joined by one tie line between consecutive areas, an approximation
    /// of the Kundur three-area layout.
    pub fn bundled_default() -> GridSpec {
        GridSpec::from_json(include_str!("../data/kundur12.json"))
            .expect("bundled grid spec is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidGrid("bus count must be positive".into()));
        }
        if self.buses.len() != self.n {
            return Err(Error::InvalidGrid(format!(
                "expected {} bus entries, found {}",
                self.n,
                self.buses.len()
            )));
        }
        if !(self.nominal_freq_hz.is_finite() && self.nominal_freq_hz > 0.0) {
            return Err(Error::InvalidGrid("nominal frequency must be positive".into()));
        }
        for (i, b) in self.buses.iter().enumerate() {
            if !(b.damping.is_finite() && b.damping > 0.0) {
                return Err(Error::InvalidGrid(format!(
                    "bus {}: damping must be positive",
                    i + 1
                )));
            }
            if !(b.rated_power.is_finite() && b.rated_power > 0.0) {
                return Err(Error::InvalidGrid(format!(
                    "bus {}: rated power must be positive",
                    i + 1
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.edges {
            if e.from == e.to {
                return Err(Error::InvalidGrid(format!(
                    "self-loop on bus {}",
                    e.from
                )));
            }
            if e.from == 0 || e.to == 0 || e.from > self.n || e.to > self.n {
                return Err(Error::InvalidGrid(format!(
                    "edge {}-{} references a bus outside 1..={}",
                    e.from, e.to, self.n
                )));
            }
            if !(e.reactance_pu.is_finite() && e.reactance_pu > 0.0) {
                return Err(Error::InvalidGrid(format!(
                    "edge {}-{}: reactance must be positive",
                    e.from, e.to
                )));
            }
            let key = (e.from.min(e.to), e.from.max(e.to));
            if !seen.insert(key) {
                return Err(Error::InvalidGrid(format!(
                    "duplicate edge {}-{}",
                    key.0, key.1
                )));
            }
        }
        if self.modes.inertia_s.is_empty() {
            return Err(Error::InvalidGrid("at least one inertia mode required".into()));
        }
        let hs = &self.modes.inertia_s;
        for (q, &h) in hs.iter().enumerate() {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::InvalidGrid(format!("inertia h_{} must be positive", q + 1)));
            }
            if q > 0 && h <= hs[q - 1] {
                return Err(Error::InvalidGrid(
                    "inertia constants must be strictly increasing".into(),
                ));
            }
        }
        self.check_connected()?;
        Ok(())
    }

    fn check_connected(&self) -> Result<()> {
        let mut adjacent = vec![Vec::new(); self.n];
        for e in &self.edges {
            adjacent[e.from - 1].push(e.to - 1);
            adjacent[e.to - 1].push(e.from - 1);
        }
        let mut reached = vec![false; self.n];
        let mut stack = vec![0usize];
        reached[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &adjacent[i] {
                if !reached[j] {
                    reached[j] = true;
                    stack.push(j);
                }
            }
        }
        let unreached: Vec<usize> = (0..self.n).filter(|&i| !reached[i]).map(|i| i + 1).collect();
        if unreached.is_empty() {
            Ok(())
        } else {
            Err(Error::Disconnected { component: unreached })
        }
    }

    /// Per-bus damping as a vector.
    pub fn damping_vector(&self) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| self.buses[i].damping)
    }
}

/// Weighted graph Laplacian: `L_ii = Σ_j b_ij`, `L_ij = -b_ij`.
///
/// Row sums are exactly zero by construction; the connected-graph
/// invariant gives a single zero eigenvalue.
pub fn build_laplacian(spec: &GridSpec) -> Result<SymMatrix> {
    spec.validate()?;
    let n = spec.n;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for e in &spec.edges {
        let b = e.susceptance();
        let (i, j) = (e.from - 1, e.to - 1);
        l[(i, j)] -= b;
        l[(j, i)] -= b;
        l[(i, i)] += b;
        l[(j, j)] += b;
    }
    Ok(SymMatrix::from_matrix(&l))
}

/// One inertia mode: inertia constant, diagonal inertia entries, the
/// continuous pair and its zero-order-hold discretization.
#[derive(Debug, Clone)]
pub struct ModeMatrices {
    pub inertia_s: f64,
    /// Diagonal of M_q in p.u.·s.
    pub inertia_diag: DVector<f64>,
    /// Continuous-time state matrix, 2n×2n.
    pub a: DMatrix<f64>,
    /// Continuous-time input matrix, 2n×n.
    pub b: DMatrix<f64>,
    /// Discrete state matrix `e^{A·dt}`.
    pub a_d: DMatrix<f64>,
    /// Discrete input matrix `(∫₀^dt e^{Aτ}dτ)·B`.
    pub b_d: DMatrix<f64>,
}

/// Immutable set of per-mode system matrices sharing one grid.
///
/// Mode ids are 1-based (`1..=count()`), matching every file format in
/// this crate.
#[derive(Debug, Clone)]
pub struct ModeSet {
    pub n_buses: usize,
    pub dt: f64,
    pub nominal_freq_hz: f64,
    pub laplacian: SymMatrix,
    pub damping: DVector<f64>,
    modes: Vec<ModeMatrices>,
}

impl ModeSet {
    pub fn count(&self) -> usize {
        self.modes.len()
    }

    /// Access a mode by its 1-based id.
    pub fn mode(&self, q: usize) -> &ModeMatrices {
        assert!(q >= 1 && q <= self.modes.len(), "mode id {q} out of range");
        &self.modes[q - 1]
    }

    pub fn modes(&self) -> &[ModeMatrices] {
        &self.modes
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n_buses
    }

    pub fn input_dim(&self) -> usize {
        self.n_buses
    }

    /// Convert a frequency deviation from Hz to per-unit.
    pub fn hz_to_pu(&self, hz: f64) -> f64 {
        hz / self.nominal_freq_hz
    }

    /// Convert a frequency deviation from per-unit to Hz.
    pub fn pu_to_hz(&self, pu: f64) -> f64 {
        pu * self.nominal_freq_hz
    }
}

/// Construct all per-mode continuous pairs and their exact zero-order-hold
/// discretizations at step `dt`.
///
/// With `uniform_inertia` the inertia at every bus is the mode constant
/// itself (`m = h_q`); otherwise `m_i = 2 h_q S_i / ω_s` with the nominal
/// frequency in Hz as ω_s.
pub fn build_modes(
    spec: &GridSpec,
    inertia_constants: &[f64],
    dt: f64,
    uniform_inertia: bool,
) -> Result<ModeSet> {
    spec.validate()?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidGrid("dt must be positive".into()));
    }
    if inertia_constants.is_empty() {
        return Err(Error::InvalidGrid("at least one inertia mode required".into()));
    }
    for &h in inertia_constants {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::InvalidGrid("inertia constants must be positive".into()));
        }
    }
    let n = spec.n;
    let laplacian = build_laplacian(spec)?;
    let damping = spec.damping_vector();

    let mut modes = Vec::with_capacity(inertia_constants.len());
    for &h in inertia_constants {
        let inertia_diag = if uniform_inertia {
            DVector::from_element(n, h)
        } else {
            DVector::from_fn(n, |i, _| {
                2.0 * h * spec.buses[i].rated_power / spec.nominal_freq_hz
            })
        };
        let (a, b) = continuous_pair(&laplacian, &damping, &inertia_diag);
        let (a_d, b_d) = zero_order_hold(&a, &b, dt)?;
        modes.push(ModeMatrices {
            inertia_s: h,
            inertia_diag,
            a,
            b,
            a_d,
            b_d,
        });
    }

    Ok(ModeSet {
        n_buses: n,
        dt,
        nominal_freq_hz: spec.nominal_freq_hz,
        laplacian,
        damping,
        modes,
    })
}

/// Assemble the block pair A = [[0, I], [-M⁻¹L, -M⁻¹D]], B = [0; M⁻¹].
fn continuous_pair(
    laplacian: &SymMatrix,
    damping: &DVector<f64>,
    inertia_diag: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = damping.len();
    let l = laplacian.as_matrix();
    let mut a = DMatrix::<f64>::zeros(2 * n, 2 * n);
    let mut b = DMatrix::<f64>::zeros(2 * n, n);
    for i in 0..n {
        a[(i, n + i)] = 1.0;
        let m_inv = 1.0 / inertia_diag[i];
        for j in 0..n {
            a[(n + i, j)] = -m_inv * l[(i, j)];
        }
        a[(n + i, n + i)] = -m_inv * damping[i];
        b[(n + i, i)] = m_inv;
    }
    (a, b)
}

/// Exact zero-order-hold discretization via the augmented exponential
/// `exp([[A, B], [0, 0]]·dt)`, whose top blocks are `(A_d, B_d)`.
pub fn zero_order_hold(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let ns = a.nrows();
    let ni = b.ncols();
    let mut aug = DMatrix::<f64>::zeros(ns + ni, ns + ni);
    aug.view_mut((0, 0), (ns, ns)).copy_from(a);
    aug.view_mut((0, ns), (ns, ni)).copy_from(b);
    let e = expm(&aug, dt)?;
    let a_d = e.view((0, 0), (ns, ns)).into_owned();
    let b_d = e.view((0, ns), (ns, ni)).into_owned();
    Ok((a_d, b_d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eig;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_bus_spec() -> GridSpec {
        GridSpec::from_json(
            r#"{
            "n": 2,
            "nominal_freq_hz": 50.0,
            "buses": [
                {"damping": 0.5, "rated_power": 1.0},
                {"damping": 0.5, "rated_power": 1.0}
            ],
            "edges": [
                {"from": 1, "to": 2, "reactance_pu": 1.0, "resistance_pu": 0.0}
            ],
            "modes": {"inertia_s": [1.0], "uniform": true}
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn laplacian_two_bus() {
        let l = build_laplacian(&two_bus_spec()).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert_relative_eq!((l.as_matrix() - expect).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn laplacian_three_bus_line() {
        let spec = GridSpec::from_json(
            r#"{
            "n": 3,
            "nominal_freq_hz": 50.0,
            "buses": [
                {"damping": 0.5}, {"damping": 0.5}, {"damping": 0.5}
            ],
            "edges": [
                {"from": 1, "to": 2, "reactance_pu": 0.5},
                {"from": 2, "to": 3, "reactance_pu": 0.5}
            ],
            "modes": {"inertia_s": [1.0], "uniform": true}
        }"#,
        )
        .unwrap();
        let l = build_laplacian(&spec).unwrap();
        for i in 0..3 {
            let row_sum: f64 = (0..3).map(|j| l[(i, j)]).sum();
            assert_relative_eq!(row_sum, 0.0, epsilon = 1e-12);
            assert!(l[(i, i)] >= (0..3).filter(|&j| j != i).map(|j| l[(i, j)].abs()).sum());
        }
        assert_relative_eq!(l[(0, 0)], 2.0, max_relative = 1e-14);
        assert_relative_eq!(l[(1, 1)], 4.0, max_relative = 1e-14);
    }

    #[test]
    fn bundled_default_has_single_zero_eigenvalue() {
        let spec = GridSpec::bundled_default();
        assert_eq!(spec.n, 12);
        let l = build_laplacian(&spec).unwrap();
        let (vals, _) = sym_eig(&l).unwrap();
        // One zero eigenvalue (connected), all others strictly positive.
        let scale = vals[11].abs();
        assert!(vals[0].abs() <= 1e-9 * scale, "zero mode {:.3e}", vals[0]);
        assert!(vals[1] > 1e-6 * scale, "second eigenvalue {:.3e}", vals[1]);
    }

    #[test]
    fn disconnected_graph_lists_component() {
        let err = GridSpec::from_json(
            r#"{
            "n": 3,
            "nominal_freq_hz": 50.0,
            "buses": [{"damping": 0.5}, {"damping": 0.5}, {"damping": 0.5}],
            "edges": [{"from": 1, "to": 2, "reactance_pu": 1.0}],
            "modes": {"inertia_s": [1.0], "uniform": true}
        }"#,
        )
        .unwrap_err();
        match err {
            Error::Disconnected { component } => assert_eq!(component, vec![3]),
            other => panic!("expected disconnected error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicate_edge_and_self_loop() {
        let dup = GridSpec::from_json(
            r#"{
            "n": 2, "nominal_freq_hz": 50.0,
            "buses": [{"damping": 0.5}, {"damping": 0.5}],
            "edges": [
                {"from": 1, "to": 2, "reactance_pu": 1.0},
                {"from": 2, "to": 1, "reactance_pu": 2.0}
            ],
            "modes": {"inertia_s": [1.0], "uniform": true}
        }"#,
        );
        assert!(matches!(dup, Err(Error::InvalidGrid(_))));

        let selfloop = GridSpec::from_json(
            r#"{
            "n": 2, "nominal_freq_hz": 50.0,
            "buses": [{"damping": 0.5}, {"damping": 0.5}],
            "edges": [{"from": 1, "to": 1, "reactance_pu": 1.0}],
            "modes": {"inertia_s": [1.0], "uniform": true}
        }"#,
        );
        assert!(matches!(selfloop, Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn single_bus_first_order_expansion() {
        let spec = GridSpec::from_json(
            r#"{
            "n": 1, "nominal_freq_hz": 50.0,
            "buses": [{"damping": 0.5}],
            "edges": [],
            "modes": {"inertia_s": [1.0], "uniform": true}
        }"#,
        )
        .unwrap();
        let dt = 1e-6;
        let modes = build_modes(&spec, &[1.0], dt, true).unwrap();
        let m = modes.mode(1);
        let first_order = DMatrix::identity(2, 2) + &m.a * dt;
        let err = (&m.a_d - first_order).norm();
        assert!(err <= 10.0 * dt * dt, "first-order gap {err:e}");
    }

    #[test]
    fn b_top_block_exactly_zero() {
        let modes = build_modes(&GridSpec::bundled_default(), &[0.5, 9.0], 1e-3, true).unwrap();
        for m in modes.modes() {
            let top = m.b.view((0, 0), (12, 12)).norm();
            assert_eq!(top, 0.0);
            let top_d = m.b_d.view((0, 0), (12, 12)).norm();
            // Discrete top block is the ∫e^{Aτ}dτ·B contribution: nonzero
            // but O(dt²/m) small.
            assert!(top_d < 1e-2);
        }
    }

    #[test]
    fn theta_dot_is_identity_block() {
        let modes = build_modes(&GridSpec::bundled_default(), &[2.0], 1e-3, true).unwrap();
        let a = &modes.mode(1).a;
        let n = 12;
        // With ω = 0 the θ̇ rows vanish; with θ = 0 they reproduce ω exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let omega = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let x = {
            let mut x = DVector::zeros(2 * n);
            x.rows_mut(n, n).copy_from(&omega);
            x
        };
        let xdot = a * &x;
        for i in 0..n {
            assert_eq!(xdot[i], omega[i]);
        }
    }

    /// Fine-step integration oracle for the discretization: classic RK4 on
    /// the matrix equation X' = AX (and the held-input augmented system),
    /// accurate far beyond the checked tolerance.
    fn rk4_state_transition(a: &DMatrix<f64>, dt: f64, substeps: usize) -> DMatrix<f64> {
        let n = a.nrows();
        let h = dt / substeps as f64;
        let mut x = DMatrix::<f64>::identity(n, n);
        for _ in 0..substeps {
            let k1 = a * &x;
            let k2 = a * (&x + &k1 * (h / 2.0));
            let k3 = a * (&x + &k2 * (h / 2.0));
            let k4 = a * (&x + &k3 * h);
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        x
    }

    #[test]
    fn zoh_state_matrix_matches_fine_integration() {
        let modes = build_modes(&GridSpec::bundled_default(), &[0.5], 1e-3, true).unwrap();
        let m = modes.mode(1);
        let oracle = rk4_state_transition(&m.a, 1e-3, 1000);
        let max_entry_gap = (&m.a_d - &oracle).abs().max();
        assert!(max_entry_gap <= 1e-6, "entry gap {max_entry_gap:e}");
    }

    #[test]
    fn zoh_step_matches_held_input_integration() {
        let modes = build_modes(&GridSpec::bundled_default(), &[0.5, 2.0, 9.0], 1e-3, true).unwrap();
        let n = modes.state_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..100 {
            let q = rng.random_range(1..=modes.count());
            let m = modes.mode(q);
            let x0 = DVector::from_fn(n, |_, _| rng.random_range(-0.01..0.01));
            let u = DVector::from_fn(modes.input_dim(), |_, _| rng.random_range(-1.0..1.0));
            // One discrete step.
            let x1 = &m.a_d * &x0 + &m.b_d * &u;
            // RK4 with held input on the true continuous dynamics.
            let substeps = 1000;
            let h = 1e-3 / substeps as f64;
            let mut x = x0.clone();
            for _ in 0..substeps {
                let f = |xv: &DVector<f64>| &m.a * xv + &m.b * &u;
                let k1 = f(&x);
                let k2 = f(&(&x + &k1 * (h / 2.0)));
                let k3 = f(&(&x + &k2 * (h / 2.0)));
                let k4 = f(&(&x + &k3 * h));
                x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            }
            let rel = (&x1 - &x).norm() / x.norm().max(1e-12);
            assert!(rel <= 1e-6, "trial {trial}: zoh step rel err {rel:e}");
        }
    }

    #[test]
    fn doubling_inertia_halves_coupling_norms() {
        let spec = GridSpec::bundled_default();
        let base = build_modes(&spec, &[1.0], 1e-3, true).unwrap();
        let doubled = build_modes(&spec, &[2.0], 1e-3, true).unwrap();
        let n = 12;
        let block = |m: &ModeMatrices| {
            (
                m.a.view((n, 0), (n, n)).norm(),
                m.a.view((n, n), (n, n)).norm(),
            )
        };
        let (l1, d1) = block(base.mode(1));
        let (l2, d2) = block(doubled.mode(1));
        assert_relative_eq!(l2, 0.5 * l1, max_relative = 1e-14);
        assert_relative_eq!(d2, 0.5 * d1, max_relative = 1e-14);
    }

    #[test]
    fn non_uniform_inertia_uses_rated_power_scaling() {
        let mut spec = two_bus_spec();
        spec.buses[1].rated_power = 2.0;
        let modes = build_modes(&spec, &[1.5], 1e-3, false).unwrap();
        let m = modes.mode(1);
        assert_relative_eq!(m.inertia_diag[0], 2.0 * 1.5 * 1.0 / 50.0, max_relative = 1e-14);
        assert_relative_eq!(m.inertia_diag[1], 2.0 * 1.5 * 2.0 / 50.0, max_relative = 1e-14);
    }
}
