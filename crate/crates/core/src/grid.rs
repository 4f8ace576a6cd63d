//! AC-network application: linearized swing dynamics over spanning-tree
//! phase coordinates, driven by first-order-filtered power-imbalance noise.
//!
//! The joint system over (δp, x) with x = (δf, δΔ) is a skew product
//! `δp' = -J δp + ξ`, `x' = A x + C δp`. Its cross impulse response is
//! `h_xp(t) = e^{At} E - E e^{-Jt}` with `E` solving the Sylvester equation
//! `A E + E J = C`, and the observable covariance block is
//! `C^x(τ) = Σ_xp h_xp^T(τ) + Σ_xx e^{A^T τ}`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matfun;
use crate::model::LtiSystem;

/// Raw AC-network parameters for the nonlinear power-balance layer.
#[derive(Debug, Clone)]
pub struct AcNetwork {
    /// Ideal line admittances `B`, symmetric with zero diagonal.
    pub susceptance: DMatrix<f64>,
    /// Line conductances `G` including self-conductances, symmetric psd.
    pub conductance: DMatrix<f64>,
    /// Voltage amplitudes per node.
    pub voltage: DVector<f64>,
    /// Damping constants `Γ_l` of the nonlinear form.
    pub damping: DVector<f64>,
    /// Rotational inertias `I_l`.
    pub inertia: DVector<f64>,
}

impl AcNetwork {
    pub fn new(
        susceptance: DMatrix<f64>,
        conductance: DMatrix<f64>,
        voltage: DVector<f64>,
        damping: DVector<f64>,
        inertia: DVector<f64>,
    ) -> Result<Self> {
        let k = voltage.len();
        if susceptance.nrows() != k || susceptance.ncols() != k {
            return Err(Error::InvalidInput("B must be k x k".into()));
        }
        if conductance.nrows() != k || conductance.ncols() != k {
            return Err(Error::InvalidInput("G must be k x k".into()));
        }
        if damping.len() != k || inertia.len() != k {
            return Err(Error::InvalidInput("damping/inertia must have length k".into()));
        }
        if !matfun::is_symmetric(&susceptance, 1e-9) || (0..k).any(|i| susceptance[(i, i)] != 0.0) {
            return Err(Error::InvalidInput(
                "B must be symmetric with zero diagonal".into(),
            ));
        }
        if !matfun::is_symmetric(&conductance, 1e-9) {
            return Err(Error::InvalidInput("G must be symmetric".into()));
        }
        if inertia.iter().any(|&v| v <= 0.0) || damping.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidInput(
                "inertias and dampings must be positive".into(),
            ));
        }
        Ok(Self {
            susceptance,
            conductance,
            voltage,
            damping,
            inertia,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.voltage.len()
    }

    /// Power injections holding the network at common frequency `f` and
    /// phases `φ`:
    /// `p_l = Γ_l f² + Σ_{l'} V_l V_{l'} (B sin(φ_l-φ_{l'}) + G cos(φ_l-φ_{l'}))`.
    pub fn equilibrium_power(&self, f: f64, phases: &DVector<f64>) -> DVector<f64> {
        let k = self.n_nodes();
        DVector::from_fn(k, |l, _| {
            let mut p = self.damping[l] * f * f;
            for lp in 0..k {
                let d = phases[l] - phases[lp];
                p += self.voltage[l]
                    * self.voltage[lp]
                    * (self.susceptance[(l, lp)] * d.sin() + self.conductance[(l, lp)] * d.cos());
            }
            p
        })
    }

    /// Invert the equilibrium map for the tree phase differences at fixed
    /// common frequency, by Newton iteration from `Δ = 0`. The root node's
    /// balance is implied by feasibility of `p`.
    pub fn solve_equilibrium(
        &self,
        p: &DVector<f64>,
        f: f64,
        tree: &SpanningTree,
    ) -> Result<DVector<f64>> {
        let k = self.n_nodes();
        if p.len() != k {
            return Err(Error::InvalidInput("p must have length k".into()));
        }
        if tree.n_nodes() != k {
            return Err(Error::InvalidTree("tree does not span the network".into()));
        }
        let root = tree.root();
        let non_root: Vec<usize> = (0..k).filter(|&l| l != root).collect();
        let mut delta = DVector::<f64>::zeros(k - 1);

        for _ in 0..50 {
            let phases = tree.phases_from_differences(&delta);
            let power = self.equilibrium_power(f, &phases);
            let residual = DVector::from_fn(k - 1, |i, _| power[non_root[i]] - p[non_root[i]]);
            if residual.amax() < 1e-10 * p.amax().max(1.0) {
                return Ok(delta);
            }
            // Jacobian of the non-root balances w.r.t. the tree differences
            let mut jac = DMatrix::<f64>::zeros(k - 1, k - 1);
            for (row, &l) in non_root.iter().enumerate() {
                for e in 0..k - 1 {
                    let mut acc = 0.0;
                    for lp in 0..k {
                        let sign = tree.path_signs()[(l, e)] - tree.path_signs()[(lp, e)];
                        if sign == 0.0 {
                            continue;
                        }
                        let d = phases[l] - phases[lp];
                        acc += self.voltage[l]
                            * self.voltage[lp]
                            * (self.susceptance[(l, lp)] * d.cos()
                                - self.conductance[(l, lp)] * d.sin())
                            * sign;
                    }
                    jac[(row, e)] = acc;
                }
            }
            let step = jac
                .full_piv_lu()
                .solve(&residual)
                .ok_or_else(|| Error::NoEquilibrium("singular Newton Jacobian".into()))?;
            delta -= step;
            if !delta.iter().all(|v| v.is_finite()) {
                return Err(Error::NoEquilibrium("Newton iteration diverged".into()));
            }
        }
        Err(Error::NoEquilibrium(
            "no convergence within 50 Newton iterations".into(),
        ))
    }

    /// Linearized parameters about an equilibrium: `M_l = I_l F`,
    /// `γ_l = 2 Γ_l F`, `T_{ll'} = V_l V_{l'} (B cos Φ_d - G sin Φ_d)`.
    pub fn linearized_coupling(&self, f0: f64, phases: &DVector<f64>) -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
        let k = self.n_nodes();
        let inertia: Vec<f64> = (0..k).map(|l| self.inertia[l] * f0).collect();
        let damping: Vec<f64> = (0..k).map(|l| 2.0 * self.damping[l] * f0).collect();
        let coupling = DMatrix::from_fn(k, k, |l, lp| {
            if l == lp {
                0.0
            } else {
                let d = phases[l] - phases[lp];
                self.voltage[l]
                    * self.voltage[lp]
                    * (self.susceptance[(l, lp)] * d.cos() - self.conductance[(l, lp)] * d.sin())
            }
        });
        (inertia, damping, coupling)
    }
}

/// Spanning tree with edges oriented away from the root; tree phase
/// differences are `Δ_e = φ_child - φ_parent`, and any node's phase
/// relative to the root is a signed sum along its path.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanningTree {
    root: usize,
    edges: Vec<(usize, usize)>,
    path_signs: DMatrix<f64>,
}

impl SpanningTree {
    /// Breadth-first spanning tree of the graph whose adjacency is the
    /// nonzero pattern of `coupling`.
    pub fn from_coupling(coupling: &DMatrix<f64>, root: usize) -> Result<Self> {
        let k = coupling.nrows();
        if root >= k {
            return Err(Error::InvalidTree(format!("root {root} out of range")));
        }
        let mut parent: Vec<Option<usize>> = vec![None; k];
        let mut seen = vec![false; k];
        let mut queue = std::collections::VecDeque::new();
        seen[root] = true;
        queue.push_back(root);
        let mut order = Vec::new();
        while let Some(l) = queue.pop_front() {
            order.push(l);
            for lp in 0..k {
                if !seen[lp] && coupling[(l, lp)] != 0.0 {
                    seen[lp] = true;
                    parent[lp] = Some(l);
                    queue.push_back(lp);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidGraph);
        }
        let edges: Vec<(usize, usize)> = order
            .iter()
            .filter_map(|&n| parent[n].map(|p| (p, n)))
            .collect();
        Self::from_edges(k, root, edges)
    }

    /// Tree from an explicit parent list (`parent[root] = root` or any
    /// self-reference is ignored).
    pub fn from_parents(root: usize, parents: &[usize]) -> Result<Self> {
        let k = parents.len();
        if root >= k {
            return Err(Error::InvalidTree(format!("root {root} out of range")));
        }
        // order children after parents by walking up
        let mut edges = Vec::new();
        for n in 0..k {
            if n != root {
                edges.push((parents[n], n));
            }
        }
        Self::from_edges(k, root, edges)
    }

    fn from_edges(k: usize, root: usize, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        if edges.len() != k.saturating_sub(1) {
            return Err(Error::InvalidTree(format!(
                "expected {} edges, got {}",
                k - 1,
                edges.len()
            )));
        }
        // topologically order edges so parents are reachable
        let mut signs = DMatrix::<f64>::zeros(k, k.saturating_sub(1));
        let mut placed = vec![false; k];
        placed[root] = true;
        let mut ordered = Vec::with_capacity(edges.len());
        while !edges.is_empty() {
            let before = edges.len();
            edges.retain(|&(p, c)| {
                if placed[p] {
                    if placed[c] || c == root || p == c {
                        // cycle or duplicate
                        return false;
                    }
                    let e = ordered.len();
                    for col in 0..e {
                        signs[(c, col)] = signs[(p, col)];
                    }
                    signs[(c, e)] = 1.0;
                    placed[c] = true;
                    ordered.push((p, c));
                    false
                } else {
                    true
                }
            });
            if edges.len() == before {
                return Err(Error::InvalidTree(
                    "edges do not form a tree rooted at the given node".into(),
                ));
            }
        }
        if placed.iter().any(|p| !p) || ordered.len() != k.saturating_sub(1) {
            return Err(Error::InvalidTree("tree does not span all nodes".into()));
        }
        Ok(Self {
            root,
            edges: ordered,
            path_signs: signs,
        })
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn n_nodes(&self) -> usize {
        self.path_signs.nrows()
    }

    /// Oriented edges (parent, child), in assembly order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Signed incidence of node phases on tree differences:
    /// `φ_n - φ_root = Σ_e path_signs[n, e] Δ_e`.
    pub fn path_signs(&self) -> &DMatrix<f64> {
        &self.path_signs
    }

    /// Node phases from tree differences, root pinned at zero.
    pub fn phases_from_differences(&self, delta: &DVector<f64>) -> DVector<f64> {
        self.path_signs() * delta
    }

    /// Phase difference `φ_a - φ_b` as a signed combination of edges.
    pub fn pair_difference(&self, a: usize, b: usize) -> DVector<f64> {
        DVector::from_fn(self.edges.len(), |e, _| {
            self.path_signs[(a, e)] - self.path_signs[(b, e)]
        })
    }
}

/// Linearized swing-network parameters plus the imbalance filter.
#[derive(Debug, Clone)]
pub struct GridParams {
    /// Linearized inertias `M_l`.
    pub inertia: Vec<f64>,
    /// Linearized dampings `γ_l`.
    pub damping: Vec<f64>,
    /// Coupling `T`, symmetric with zero diagonal.
    pub coupling: DMatrix<f64>,
    /// Imbalance relaxation `J` (`-J` stable).
    pub relaxation: DMatrix<f64>,
    /// Imbalance noise covariance rate `K`.
    pub noise: DMatrix<f64>,
    pub tree: SpanningTree,
}

impl GridParams {
    pub fn new(
        inertia: Vec<f64>,
        damping: Vec<f64>,
        coupling: DMatrix<f64>,
        relaxation: DMatrix<f64>,
        noise: DMatrix<f64>,
        tree: SpanningTree,
    ) -> Result<Self> {
        let k = inertia.len();
        if damping.len() != k || coupling.nrows() != k || coupling.ncols() != k {
            return Err(Error::InvalidInput("grid dimensions inconsistent".into()));
        }
        if tree.n_nodes() != k {
            return Err(Error::InvalidTree("tree does not span the grid".into()));
        }
        if inertia.iter().any(|&m| m <= 0.0) || damping.iter().any(|&g| g <= 0.0) {
            return Err(Error::InvalidInput(
                "inertias and dampings must be positive".into(),
            ));
        }
        if !matfun::is_symmetric(&coupling, 1e-9) {
            return Err(Error::InvalidInput("coupling must be symmetric".into()));
        }
        if relaxation.nrows() != k || relaxation.ncols() != k {
            return Err(Error::InvalidInput("J must be k x k".into()));
        }
        let st = matfun::is_stable(&(-relaxation.clone()))?;
        if !st.stable {
            return Err(Error::UnstableSystem { margin: st.margin });
        }
        matfun::check_symmetric_psd("K", &noise, 1e-10)?;
        Ok(Self {
            inertia,
            damping,
            coupling,
            relaxation,
            noise,
            tree,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.inertia.len()
    }

    /// State dimension of the swing block, `2k - 1`.
    pub fn x_dim(&self) -> usize {
        2 * self.n_nodes() - 1
    }

    /// Linearized swing dynamics over `(δf, δΔ)`:
    /// `M_l δf_l' = δp_l - γ_l δf_l - Σ T_{ll'} (δφ_l - δφ_{l'})`,
    /// `δΔ_e' = δf_child - δf_parent`, with `C = [diag(1/M_l); 0]`.
    pub fn linearize(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let k = self.n_nodes();
        let n = self.x_dim();
        let w = self.tree.path_signs();
        let mut a = DMatrix::<f64>::zeros(n, n);
        for l in 0..k {
            a[(l, l)] = -self.damping[l] / self.inertia[l];
            for lp in 0..k {
                let t = self.coupling[(l, lp)];
                if t == 0.0 || l == lp {
                    continue;
                }
                for e in 0..k - 1 {
                    a[(l, k + e)] -= t * (w[(l, e)] - w[(lp, e)]) / self.inertia[l];
                }
            }
        }
        for (e, &(parent, child)) in self.tree.edges().iter().enumerate() {
            a[(k + e, child)] = 1.0;
            a[(k + e, parent)] = -1.0;
        }
        let mut c = DMatrix::<f64>::zeros(n, k);
        for l in 0..k {
            c[(l, l)] = 1.0 / self.inertia[l];
        }
        (a, c)
    }

    /// Assemble the skew-product joint system over `(δp, x)`.
    pub fn assemble_joint(&self) -> Result<JointGridSystem> {
        let (a, c) = self.linearize();
        JointGridSystem::new(a, c, self.relaxation.clone(), self.noise.clone())
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let k = self.n_nodes();
        serde_json::to_value(GridJson {
            format: GRID_FORMAT.to_string(),
            nodes: (0..k)
                .map(|l| NodeJson {
                    m: self.inertia[l],
                    gamma: self.damping[l],
                })
                .collect(),
            edges: {
                let mut out = Vec::new();
                for a in 0..k {
                    for b in a + 1..k {
                        if self.coupling[(a, b)] != 0.0 {
                            out.push(EdgeJson {
                                a,
                                b,
                                t: self.coupling[(a, b)],
                            });
                        }
                    }
                }
                out
            },
            relaxation: (0..k)
                .map(|i| (0..k).map(|j| self.relaxation[(i, j)]).collect())
                .collect(),
            noise: (0..k)
                .map(|i| (0..k).map(|j| self.noise[(i, j)]).collect())
                .collect(),
            tree_root: self.tree.root(),
        })
        .expect("grid serialization cannot fail")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("serialization cannot fail")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: GridJson = serde_json::from_str(s)?;
        doc.into_params()
    }
}

const GRID_FORMAT: &str = "grid-model/1";

#[derive(Debug, Serialize, Deserialize)]
struct NodeJson {
    m: f64,
    gamma: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeJson {
    a: usize,
    b: usize,
    t: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct GridJson {
    format: String,
    nodes: Vec<NodeJson>,
    edges: Vec<EdgeJson>,
    relaxation: Vec<Vec<f64>>,
    noise: Vec<Vec<f64>>,
    tree_root: usize,
}

impl GridJson {
    fn into_params(self) -> Result<GridParams> {
        if self.format != GRID_FORMAT {
            return Err(Error::InvalidInput(format!(
                "unsupported grid format {:?}, expected {GRID_FORMAT:?}",
                self.format
            )));
        }
        let k = self.nodes.len();
        let mut coupling = DMatrix::<f64>::zeros(k, k);
        for e in &self.edges {
            if e.a >= k || e.b >= k || e.a == e.b {
                return Err(Error::InvalidInput(format!(
                    "bad edge ({}, {})",
                    e.a, e.b
                )));
            }
            coupling[(e.a, e.b)] = e.t;
            coupling[(e.b, e.a)] = e.t;
        }
        let matrix_from = |rows: &Vec<Vec<f64>>, name: &str| -> Result<DMatrix<f64>> {
            if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                return Err(Error::InvalidInput(format!("{name} must be {k}x{k}")));
            }
            Ok(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
        };
        let relaxation = matrix_from(&self.relaxation, "relaxation")?;
        let noise = matrix_from(&self.noise, "noise")?;
        let tree = if k == 1 {
            SpanningTree::from_parents(self.tree_root, &[self.tree_root])?
        } else {
            SpanningTree::from_coupling(&coupling, self.tree_root)?
        };
        GridParams::new(
            self.nodes.iter().map(|n| n.m).collect(),
            self.nodes.iter().map(|n| n.gamma).collect(),
            coupling,
            relaxation,
            noise,
            tree,
        )
    }
}

/// The assembled joint system with its Sylvester cross-coupling solution.
#[derive(Debug, Clone)]
pub struct JointGridSystem {
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    relaxation: DMatrix<f64>,
    cross: DMatrix<f64>,
    joint: LtiSystem,
}

impl JointGridSystem {
    /// Build from the linearized blocks; fails with
    /// [`Error::SpectrumOverlap`] when `A` and `-J` share an eigenvalue
    /// (the excluded degenerate case).
    pub fn new(
        a: DMatrix<f64>,
        c: DMatrix<f64>,
        relaxation: DMatrix<f64>,
        noise: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        let k = relaxation.nrows();
        if c.nrows() != n || c.ncols() != k {
            return Err(Error::InvalidInput("C must be n x k".into()));
        }
        let cross = matfun::solve_sylvester(&a, &relaxation, &c)?;

        // joint drift over (δp, x): [[-J, 0], [C, A]]
        let dim = k + n;
        let mut drift = DMatrix::<f64>::zeros(dim, dim);
        drift.view_mut((0, 0), (k, k)).copy_from(&(-&relaxation));
        drift.view_mut((k, 0), (n, k)).copy_from(&c);
        drift.view_mut((k, k), (n, n)).copy_from(&a);
        let mut joint_noise = DMatrix::<f64>::zeros(dim, dim);
        joint_noise.view_mut((0, 0), (k, k)).copy_from(&noise);
        let joint = LtiSystem::new(drift, joint_noise)?;

        Ok(Self {
            a,
            c,
            relaxation,
            cross,
            joint,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.relaxation.nrows()
    }

    pub fn x_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn swing_drift(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn input_map(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// The Sylvester solution `E` with `A E + E J = C`.
    pub fn cross_coupling(&self) -> &DMatrix<f64> {
        &self.cross
    }

    /// The full `(δp, x)` system.
    pub fn joint_system(&self) -> &LtiSystem {
        &self.joint
    }

    /// Cross impulse response `h_xp(t) = e^{At} E - E e^{-Jt}`; zero at
    /// `t = 0` with derivative `C`.
    pub fn h_xp(&self, t: f64) -> Result<DMatrix<f64>> {
        Ok(matfun::expm(&self.a, t)? * &self.cross
            - &self.cross * matfun::expm(&(-self.relaxation.clone()), t)?)
    }

    /// The x-block lagged covariance from the skew-product blocks:
    /// `C^x(τ) = Σ_xp h_xp^T(τ) + Σ_xx e^{A^T τ}` for `τ >= 0` (negative
    /// lags by transpose symmetry).
    pub fn skew_covariance(&self, tau: f64) -> Result<DMatrix<f64>> {
        if tau < 0.0 {
            return Ok(self.skew_covariance(-tau)?.transpose());
        }
        let k = self.n_nodes();
        let n = self.x_dim();
        let sigma = self.joint.stationary_covariance()?;
        let sigma_xp = sigma.view((k, 0), (n, k)).into_owned();
        let sigma_xx = sigma.view((k, k), (n, n)).into_owned();
        Ok(&sigma_xp * self.h_xp(tau)?.transpose()
            + &sigma_xx * matfun::expm(&self.a, tau)?.transpose())
    }

    /// Selector from the joint state onto the PMU observable set: `f` at
    /// each listed PMU node, then phase differences along a spanning tree
    /// of the PMU subset (consecutive listed PMUs chained, each difference
    /// a signed sum of original tree edges). Returns the selector together
    /// with channel names `f_<node>` and `dphi_<a>_<b>`.
    pub fn pmu_selector(
        &self,
        tree: &SpanningTree,
        pmus: &[usize],
    ) -> Result<(DMatrix<f64>, Vec<String>)> {
        let k = self.n_nodes();
        if pmus.is_empty() {
            return Err(Error::InvalidScheme("PMU list is empty".into()));
        }
        let mut seen = vec![false; k];
        for &p in pmus {
            if p >= k {
                return Err(Error::InvalidScheme(format!("PMU node {p} out of range")));
            }
            if seen[p] {
                return Err(Error::InvalidScheme(format!("duplicate PMU node {p}")));
            }
            seen[p] = true;
        }
        let m = 2 * pmus.len() - 1;
        let dim = k + self.x_dim();
        let mut z = DMatrix::<f64>::zeros(m, dim);
        let mut names = Vec::with_capacity(m);
        for (row, &p) in pmus.iter().enumerate() {
            z[(row, k + p)] = 1.0;
            names.push(format!("f_{p}"));
        }
        for (i, w) in pmus.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let combo = tree.pair_difference(b, a);
            for e in 0..combo.len() {
                z[(pmus.len() + i, k + k + e)] = combo[e];
            }
            names.push(format!("dphi_{a}_{b}"));
        }
        Ok((z, names))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn two_node_ac() -> AcNetwork {
        AcNetwork::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            DMatrix::zeros(2, 2),
            DVector::from_element(2, 1.0),
            DVector::from_element(2, 1e-9),
            DVector::from_element(2, 1.0),
        )
        .unwrap()
    }

    fn random_grid(rng: &mut StdRng, k: usize) -> GridParams {
        let mut coupling = DMatrix::<f64>::zeros(k, k);
        for a in 0..k {
            for b in a + 1..k {
                let t = rng.random_range(0.5..2.0);
                coupling[(a, b)] = t;
                coupling[(b, a)] = t;
            }
        }
        let tree = SpanningTree::from_coupling(&coupling, 0).unwrap();
        let relaxation = DMatrix::from_diagonal(&DVector::from_fn(k, |_, _| {
            rng.random_range(2.0..6.0)
        }));
        let g = DMatrix::from_fn(k, k, |_, _| rng.random_range(-0.5..0.5));
        let noise = &g * g.transpose() + DMatrix::identity(k, k) * 0.2;
        GridParams::new(
            (0..k).map(|_| rng.random_range(0.5..2.0)).collect(),
            (0..k).map(|_| rng.random_range(0.3..1.5)).collect(),
            coupling,
            relaxation,
            noise,
            tree,
        )
        .unwrap()
    }

    #[test]
    fn equilibrium_power_equal_phases_is_damping_only() {
        let net = AcNetwork::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.3, 1.3, 0.0]),
            DMatrix::zeros(2, 2),
            DVector::from_element(2, 1.0),
            DVector::from_row_slice(&[0.5, 0.7]),
            DVector::from_element(2, 1.0),
        )
        .unwrap();
        let f = 2.0;
        let p = net.equilibrium_power(f, &DVector::from_element(2, 0.3));
        assert_relative_eq!(p[0], 0.5 * f * f, max_relative = 1e-14);
        assert_relative_eq!(p[1], 0.7 * f * f, max_relative = 1e-14);
    }

    #[test]
    fn equilibrium_power_two_node_sine() {
        let net = two_node_ac();
        let phases = DVector::from_row_slice(&[std::f64::consts::PI / 6.0, 0.0]);
        let p = net.equilibrium_power(0.0, &phases);
        assert_relative_eq!(p[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(p[1], -0.5, max_relative = 1e-12);
    }

    #[test]
    fn equilibrium_round_trip() {
        let net = two_node_ac();
        let tree = SpanningTree::from_parents(0, &[0, 0]).unwrap();
        let truth = DVector::from_row_slice(&[-std::f64::consts::PI / 6.0]);
        // Δ = φ_1 - φ_0 with root 0: phases (0, Δ)
        let phases = tree.phases_from_differences(&truth);
        let p = net.equilibrium_power(0.0, &phases);
        let solved = net.solve_equilibrium(&p, 0.0, &tree).unwrap();
        assert_relative_eq!(solved[0], truth[0], epsilon = 1e-10);
    }

    #[test]
    fn equilibrium_zero_power_is_flat() {
        let net = two_node_ac();
        let tree = SpanningTree::from_parents(0, &[0, 0]).unwrap();
        let solved = net
            .solve_equilibrium(&DVector::zeros(2), 0.0, &tree)
            .unwrap();
        assert!(solved.amax() < 1e-12);
    }

    #[test]
    fn equilibrium_beyond_capacity_fails() {
        // |p| > V² B with no damping and no losses cannot be balanced
        let net = two_node_ac();
        let tree = SpanningTree::from_parents(0, &[0, 0]).unwrap();
        let res = net.solve_equilibrium(&DVector::from_row_slice(&[1.5, -1.5]), 0.0, &tree);
        assert!(matches!(res, Err(Error::NoEquilibrium(_))));
    }

    #[test]
    fn linearize_single_node_is_aggregate() {
        let tree = SpanningTree::from_parents(0, &[0]).unwrap();
        let params = GridParams::new(
            vec![2.0],
            vec![0.8],
            DMatrix::zeros(1, 1),
            DMatrix::from_row_slice(1, 1, &[3.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            tree,
        )
        .unwrap();
        let (a, c) = params.linearize();
        assert_eq!(a.nrows(), 1);
        assert_relative_eq!(a[(0, 0)], -0.4);
        assert_relative_eq!(c[(0, 0)], 0.5);
    }

    #[test]
    fn linearize_two_node_hand_assembly() {
        let tree = SpanningTree::from_parents(0, &[0, 0]).unwrap();
        let params = GridParams::new(
            vec![1.0, 1.0],
            vec![1.0, 1.0],
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            tree,
        )
        .unwrap();
        let (a, _) = params.linearize();
        // Δ = φ_1 - φ_0: swing rows couple through ±Δ, the edge row is
        // δf_1 - δf_0
        let expected = DMatrix::from_row_slice(3, 3, &[-1.0, 0.0, 1.0, 0.0, -1.0, -1.0, -1.0, 1.0, 0.0]);
        assert!((a.clone() - &expected).norm() < 1e-14, "got {a}");
        // the opposite Δ orientation is the diag(1,1,-1) conjugation
        let d = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 1.0, -1.0]));
        let flipped = &d * &a * &d;
        let alt = DMatrix::from_row_slice(3, 3, &[-1.0, 0.0, -1.0, 0.0, -1.0, 1.0, 1.0, -1.0, 0.0]);
        assert!((flipped - alt).norm() < 1e-14);
    }

    #[test]
    fn linearized_grids_are_stable() {
        let mut rng = StdRng::seed_from_u64(17);
        for k in 2..=5 {
            let params = random_grid(&mut rng, k);
            let (a, _) = params.linearize();
            let st = matfun::is_stable(&a).unwrap();
            assert!(st.stable, "k={k}: margin {}", st.margin);
        }
    }

    #[test]
    fn scalar_sylvester_cross_coupling() {
        let j = std::f64::consts::E.powi(2);
        let jgs = JointGridSystem::new(
            DMatrix::from_row_slice(1, 1, &[-1.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DMatrix::from_row_slice(1, 1, &[j]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
        )
        .unwrap();
        let expected = 1.0 / (j - 1.0);
        assert_relative_eq!(jgs.cross_coupling()[(0, 0)], expected, max_relative = 1e-12);
        assert_relative_eq!(jgs.cross_coupling()[(0, 0)], 0.15652, max_relative = 1e-4);
    }

    #[test]
    fn cross_impulse_response_boundary_conditions() {
        let mut rng = StdRng::seed_from_u64(23);
        let params = random_grid(&mut rng, 3);
        let jgs = params.assemble_joint().unwrap();
        assert!(jgs.h_xp(0.0).unwrap().norm() < 1e-14);
        let h = 1e-6;
        let deriv = (jgs.h_xp(h).unwrap() - jgs.h_xp(0.0).unwrap()) / h;
        assert!(
            (deriv - jgs.input_map()).norm() < 1e-5 * jgs.input_map().norm(),
            "derivative at zero should be C"
        );
    }

    #[test]
    fn sylvester_residual_for_assembled_grids() {
        let mut rng = StdRng::seed_from_u64(29);
        for k in 1..=4 {
            let params = random_grid(&mut rng, k);
            let jgs = params.assemble_joint().unwrap();
            let resid = jgs.swing_drift() * jgs.cross_coupling()
                + jgs.cross_coupling() * &params.relaxation
                - jgs.input_map();
            let scale = (jgs.swing_drift().norm() + params.relaxation.norm())
                * jgs.cross_coupling().norm()
                + jgs.input_map().norm();
            assert!(resid.norm() < 1e-10 * scale, "k={k}");
        }
    }

    #[test]
    fn skew_covariance_matches_joint_lagged_covariance() {
        let mut rng = StdRng::seed_from_u64(31);
        for k in 1..=4 {
            let params = random_grid(&mut rng, k);
            let jgs = params.assemble_joint().unwrap();
            let joint = jgs.joint_system();
            for tau in [0.0, 0.1, 1.0, 10.0] {
                let skew = jgs.skew_covariance(tau).unwrap();
                let full = joint.lagged_covariance(tau).unwrap();
                let xx = full
                    .view((k, k), (jgs.x_dim(), jgs.x_dim()))
                    .into_owned();
                assert!(
                    (skew.clone() - &xx).norm() < 1e-8 * xx.norm().max(1.0),
                    "k={k} tau={tau}: {:.3e}",
                    (skew - &xx).norm()
                );
            }
        }
    }

    #[test]
    fn single_node_reduces_to_fou_kernel() {
        use crate::model::KernelParams;
        let (m, gamma, j, sigma2) = (1.3, 0.6, 4.0, 2.2);
        let tree = SpanningTree::from_parents(0, &[0]).unwrap();
        let params = GridParams::new(
            vec![m],
            vec![gamma],
            DMatrix::zeros(1, 1),
            DMatrix::from_row_slice(1, 1, &[j]),
            DMatrix::from_row_slice(1, 1, &[sigma2]),
            tree,
        )
        .unwrap();
        let jgs = params.assemble_joint().unwrap();
        let fou = KernelParams::Fou {
            mass: m,
            damping: gamma,
            relaxation: j,
            sigma: sigma2.sqrt(),
        };
        for tau in [0.0, 0.1, 1.0, 5.0] {
            let grid_cov = jgs.skew_covariance(tau).unwrap()[(0, 0)];
            let kernel = fou.eval(tau).unwrap();
            assert!(
                (grid_cov - kernel).abs() < 1e-10 * kernel.abs().max(1e-10),
                "tau={tau}: {grid_cov} vs {kernel}"
            );
        }
    }

    #[test]
    fn covariance_decays_at_long_lags() {
        let mut rng = StdRng::seed_from_u64(37);
        let params = random_grid(&mut rng, 3);
        let jgs = params.assemble_joint().unwrap();
        let margin = matfun::is_stable(jgs.joint_system().drift()).unwrap().margin;
        let c = jgs.skew_covariance(60.0 / margin).unwrap();
        assert!(c.norm() < 1e-8);
    }

    #[test]
    fn mean_frequencies_are_equal_across_nodes() {
        let mut rng = StdRng::seed_from_u64(41);
        let params = random_grid(&mut rng, 4);
        let jgs = params.assemble_joint().unwrap();
        let k = params.n_nodes();
        // constant mean imbalance forcing on the δp block
        let mut forcing = DVector::zeros(k + jgs.x_dim());
        for l in 0..k {
            forcing[l] = rng.random_range(0.1..1.0);
        }
        let sys = LtiSystem::with_mean_forcing(
            jgs.joint_system().drift().clone(),
            jgs.joint_system().noise().clone(),
            forcing,
        )
        .unwrap();
        let mean = sys.mean_response();
        let f0 = mean[k];
        for l in 1..k {
            assert_relative_eq!(mean[k + l], f0, max_relative = 1e-9);
        }
    }

    #[test]
    fn spanning_tree_path_graph() {
        let mut coupling = DMatrix::<f64>::zeros(3, 3);
        coupling[(0, 1)] = 1.0;
        coupling[(1, 0)] = 1.0;
        coupling[(1, 2)] = 1.0;
        coupling[(2, 1)] = 1.0;
        let tree = SpanningTree::from_coupling(&coupling, 0).unwrap();
        assert_eq!(tree.edges(), &[(0, 1), (1, 2)]);
        // Δ(2, 0) telescopes: Δ_{01} + Δ_{12}
        let combo = tree.pair_difference(2, 0);
        assert_eq!(combo.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn spanning_tree_star_graph() {
        let k = 5;
        let mut coupling = DMatrix::<f64>::zeros(k, k);
        for l in 1..k {
            coupling[(0, l)] = 1.0;
            coupling[(l, 0)] = 1.0;
        }
        let tree = SpanningTree::from_coupling(&coupling, 0).unwrap();
        assert_eq!(tree.edges().len(), 4);
        assert!(tree.edges().iter().all(|&(p, _)| p == 0));
    }

    #[test]
    fn disconnected_graph_rejected() {
        let coupling = DMatrix::<f64>::zeros(3, 3);
        assert!(matches!(
            SpanningTree::from_coupling(&coupling, 0),
            Err(Error::InvalidGraph)
        ));
    }

    #[test]
    fn pair_difference_reconstruction_random_trees() {
        let mut rng = StdRng::seed_from_u64(43);
        let params = random_grid(&mut rng, 6);
        let tree = &params.tree;
        let delta = DVector::from_fn(5, |_, _| rng.random_range(-0.3..0.3));
        let phases = tree.phases_from_differences(&delta);
        for a in 0..6 {
            for b in 0..6 {
                let combo = tree.pair_difference(a, b);
                let diff = combo.dot(&delta);
                assert_relative_eq!(diff, phases[a] - phases[b], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn grid_json_round_trip() {
        let mut rng = StdRng::seed_from_u64(47);
        let params = random_grid(&mut rng, 3);
        let text = params.to_json_string();
        assert!(text.contains("grid-model/1"));
        let back = GridParams::from_json_str(&text).unwrap();
        assert_eq!(back.inertia, params.inertia);
        assert!((back.coupling - &params.coupling).norm() < 1e-15);
        assert!((back.relaxation - &params.relaxation).norm() < 1e-15);
        assert_eq!(back.tree, params.tree);
    }

    #[test]
    fn pmu_selector_names_and_rows() {
        let mut rng = StdRng::seed_from_u64(53);
        let params = random_grid(&mut rng, 4);
        let jgs = params.assemble_joint().unwrap();
        let (z, names) = jgs.pmu_selector(&params.tree, &[0, 2]).unwrap();
        assert_eq!(names, vec!["f_0".to_string(), "f_2".to_string(), "dphi_0_2".to_string()]);
        assert_eq!(z.nrows(), 3);
        // frequency rows pick the δf coordinates directly
        assert_eq!(z[(0, 4)], 1.0);
        assert_eq!(z[(1, 6)], 1.0);
    }
}
