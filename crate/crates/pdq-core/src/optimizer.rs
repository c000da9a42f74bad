//! Riemannian Gauss-Newton solver for planar pose graphs.
//!
//! Edge errors are tangent-space residuals
//! `e_ij = Log_𝟙(z_ij⁻¹ ⊞ x_i⁻¹ ⊞ x_j)` and the cost is the sum of their
//! Mahalanobis norms. Each iteration projects the classical gradient and
//! the Gauss-Newton Hessian approximation onto per-node tangent planes,
//! solves the reduced sparse normal equations in tangent-basis
//! coordinates with one node anchored, and retracts the step back to the
//! manifold through the exponential map.

use crate::graph::{Edge, PoseGraph};
use crate::linsys::BlockSystem;
use crate::manifold::{
    canonical_sign, conj_raw, dlog_raw, left_mat, log_raw, mul_raw, right_mat, sinc,
    PlanarDualQuat, Tangent,
};
use nalgebra::{DMatrix, Matrix3, Matrix4, SMatrix, Vector3, Vector4};
use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;
use thiserror::Error;

/// Errors from solver entry points.
#[derive(Debug, Error)]
pub enum SolveError {
    #[error("graph is disconnected; optimization requires a connected graph")]
    Disconnected,
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("anchor node {anchor} out of range (node count {nodes})")]
    AnchorOutOfRange { anchor: usize, nodes: usize },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("linear solve failed: reduced system is singular")]
    LinearSolveFailure,
}

/// Solver knobs. `fixed_iterations` disables the gradient check and runs
/// exactly that many steps.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub fixed_iterations: Option<usize>,
    pub anchor_node: usize,
    /// Added to the reduced Hessian diagonal; escalated tenfold on
    /// factorization failure.
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 100,
            gradient_tolerance: 1e-6,
            fixed_iterations: None,
            anchor_node: 0,
            damping: 0.0,
        }
    }
}

impl SolverConfig {
    fn check(&self, graph: &PoseGraph) -> Result<(), SolveError> {
        if self.max_iterations == 0 {
            return Err(SolveError::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(SolveError::InvalidConfig(
                "gradient_tolerance must be positive".into(),
            ));
        }
        if self.damping < 0.0 {
            return Err(SolveError::InvalidConfig(
                "damping must be non-negative".into(),
            ));
        }
        if self.anchor_node >= graph.node_count() {
            return Err(SolveError::AnchorOutOfRange {
                anchor: self.anchor_node,
                nodes: graph.node_count(),
            });
        }
        Ok(())
    }
}

/// Why the solver stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    GradientConverged,
    IterationLimit,
    LinearSolveFailure,
}

impl fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TerminationReason::GradientConverged => "gradient-converged",
            TerminationReason::IterationLimit => "iteration-limit",
            TerminationReason::LinearSolveFailure => "linear-solve-failure",
        };
        f.write_str(s)
    }
}

/// One executed iteration: cost after the step, gradient norm at the
/// linearization point, step norm, wall time.
#[derive(Debug, Clone, Copy)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub gradient_norm: f64,
    pub step_norm: f64,
    pub millis: f64,
}

/// Observable trace of a solver run.
#[derive(Debug, Clone)]
pub struct SolverReport {
    pub iterations: Vec<IterationRecord>,
    pub termination: TerminationReason,
}

impl SolverReport {
    /// CSV with header `iter,cost,grad_norm,step_norm,millis`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,cost,grad_norm,step_norm,millis\n");
        for r in &self.iterations {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.3}\n",
                r.iteration, r.cost, r.gradient_norm, r.step_norm, r.millis
            ));
        }
        out
    }

    pub fn final_cost(&self) -> Option<f64> {
        self.iterations.last().map(|r| r.cost)
    }
}

/// Per-edge linearization: residual and the classical ambient Jacobians
/// of the residual with respect to both endpoint poses.
struct EdgeTerms {
    e: Vector3<f64>,
    a: SMatrix<f64, 3, 4>,
    b: SMatrix<f64, 3, 4>,
}

const CONJ_DIAG: Matrix4<f64> = Matrix4::new(
    1.0, 0.0, 0.0, 0.0, //
    0.0, -1.0, 0.0, 0.0, //
    0.0, 0.0, -1.0, 0.0, //
    0.0, 0.0, 0.0, -1.0,
);

fn edge_terms(x_i: &PlanarDualQuat, x_j: &PlanarDualQuat, z: &PlanarDualQuat) -> EdgeTerms {
    let zc = conj_raw(&z.coords());
    let xic = conj_raw(&x_i.coords());
    let c_ij = mul_raw(&zc, &xic);
    let q_raw = mul_raw(&c_ij, &x_j.coords());
    let s = canonical_sign(&q_raw);
    let q = s * q_raw;
    let e = log_raw(&q);
    let dl = dlog_raw(&q);
    let b = s * dl * left_mat(&c_ij);
    let a = s * dl * left_mat(&zc) * right_mat(&x_j.coords()) * CONJ_DIAG;
    EdgeTerms { e, a, b }
}

/// Tangent residual of one edge: zero iff the measurement is consistent
/// with the endpoints (up to representative sign).
pub fn edge_error(x_i: &PlanarDualQuat, x_j: &PlanarDualQuat, z: &PlanarDualQuat) -> Tangent {
    Tangent(edge_terms(x_i, x_j, z).e)
}

/// Half the Mahalanobis norm of one edge residual: `½ eᵀ Ω e`.
pub fn edge_cost(x_i: &PlanarDualQuat, x_j: &PlanarDualQuat, edge: &Edge) -> f64 {
    let e = edge_terms(x_i, x_j, &edge.z).e;
    0.5 * e.dot(&(edge.omega.matrix() * e))
}

/// Total cost `Σ eᵀ Ω e` over all edges (twice the sum of [`edge_cost`];
/// the constant factor does not move the minimizer).
pub fn total_cost(graph: &PoseGraph) -> f64 {
    graph
        .edges()
        .iter()
        .map(|edge| {
            let e = edge_terms(graph.node(edge.i), graph.node(edge.j), &edge.z).e;
            e.dot(&(edge.omega.matrix() * e))
        })
        .sum()
}

/// Classical ambient Jacobians of the edge residual with respect to
/// `x_i` and `x_j`.
pub fn edge_jacobians(
    x_i: &PlanarDualQuat,
    x_j: &PlanarDualQuat,
    z: &PlanarDualQuat,
) -> (SMatrix<f64, 3, 4>, SMatrix<f64, 3, 4>) {
    let terms = edge_terms(x_i, x_j, z);
    (terms.a, terms.b)
}

/// Tangent residual computed from the pose parameters
/// `(δθ, δt_x, δt_y)` of the relative pose through the half-angle
/// transform `½ M(δθ) δ` with `α = δθ/2`, `β = cos(δθ/2)/sinc(δθ/2)`.
///
/// Algebraically identical to `log_identity(from_pose(δθ, δt))`; kept as
/// its own operation because the information matrices shipped with
/// datasets weight exactly these pose parameters.
pub fn adapt_error_small_angle(delta: Vector3<f64>) -> Tangent {
    let half = delta.x / 2.0;
    let alpha = half;
    let beta = half.cos() / sinc(half);
    Tangent(Vector3::new(
        0.5 * delta.x,
        0.5 * (beta * delta.y + alpha * delta.z),
        0.5 * (-alpha * delta.y + beta * delta.z),
    ))
}

/// Riemannian gradient of the per-edge-scaled cost `Σ ½ eᵀΩe`, one
/// ambient block per node, each lying in that node's tangent plane.
pub fn riemannian_gradient(graph: &PoseGraph) -> Vec<Vector4<f64>> {
    let mut grad = vec![Vector4::zeros(); graph.node_count()];
    for edge in graph.edges() {
        let terms = edge_terms(graph.node(edge.i), graph.node(edge.j), &edge.z);
        let w = edge.omega.matrix() * terms.e;
        grad[edge.i] += terms.a.transpose() * w;
        grad[edge.j] += terms.b.transpose() * w;
    }
    for (i, g) in grad.iter_mut().enumerate() {
        *g = graph.node(i).tangent_projection() * *g;
    }
    grad
}

/// Projected Gauss-Newton Hessian approximation in ambient coordinates,
/// stored as 4x4 blocks on the graph's sparsity pattern.
#[derive(Debug, Clone)]
pub struct HessianBlocks {
    node_count: usize,
    blocks: BTreeMap<(usize, usize), Matrix4<f64>>,
}

impl HessianBlocks {
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn block(&self, i: usize, j: usize) -> Option<&Matrix4<f64>> {
        self.blocks.get(&(i, j))
    }

    /// Occupied block coordinates, sorted.
    pub fn occupied(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.blocks.keys().copied()
    }

    /// Dense 4n x 4n expansion, for tests and small graphs.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.node_count * 4;
        let mut m = DMatrix::zeros(n, n);
        for (&(bi, bj), block) in &self.blocks {
            m.view_mut((bi * 4, bj * 4), (4, 4)).copy_from(block);
        }
        m
    }
}

/// Assembles the projected Hessian blocks
/// `H[ii] = P A ᵀΩ A Pᵀ`, `H[ij] = P AᵀΩ B Pᵀ`, and their mirrors.
pub fn hessian_blocks(graph: &PoseGraph) -> HessianBlocks {
    let mut blocks: BTreeMap<(usize, usize), Matrix4<f64>> = BTreeMap::new();
    let mut add = |key: (usize, usize), m: Matrix4<f64>| {
        *blocks.entry(key).or_insert_with(Matrix4::zeros) += m;
    };
    for edge in graph.edges() {
        let terms = edge_terms(graph.node(edge.i), graph.node(edge.j), &edge.z);
        let omega = edge.omega.matrix();
        let ap = terms.a * graph.node(edge.i).tangent_projection();
        let bp = terms.b * graph.node(edge.j).tangent_projection();
        add((edge.i, edge.i), ap.transpose() * omega * ap);
        add((edge.i, edge.j), ap.transpose() * omega * bp);
        add((edge.j, edge.i), bp.transpose() * omega * ap);
        add((edge.j, edge.j), bp.transpose() * omega * bp);
    }
    HessianBlocks {
        node_count: graph.node_count(),
        blocks,
    }
}

/// The assembled reduced system: normal equations in per-node
/// tangent-basis coordinates with the anchor's rows and columns removed.
struct ReducedSystem {
    system: BlockSystem<3>,
    /// Dense free-slot index per node; the anchor maps to `None`.
    free_index: Vec<Option<usize>>,
    gradient_norm: f64,
}

fn assemble_reduced(graph: &PoseGraph, anchor: usize) -> ReducedSystem {
    let n = graph.node_count();
    let mut free_index = vec![None; n];
    let mut next = 0;
    for (i, slot) in free_index.iter_mut().enumerate() {
        if i != anchor {
            *slot = Some(next);
            next += 1;
        }
    }

    let mut system = BlockSystem::<3>::new(next);
    let bases: Vec<_> = graph.nodes().iter().map(|x| x.tangent_basis()).collect();

    for edge in graph.edges() {
        let terms = edge_terms(graph.node(edge.i), graph.node(edge.j), &edge.z);
        let omega = edge.omega.matrix();
        // restrict the ambient Jacobians to tangent-basis coordinates;
        // the projection is implicit because P B = B
        let ar: Matrix3<f64> = terms.a * bases[edge.i];
        let br: Matrix3<f64> = terms.b * bases[edge.j];
        let fi = free_index[edge.i];
        let fj = free_index[edge.j];
        if let Some(fi) = fi {
            system.add_block(fi, fi, &(ar.transpose() * omega * ar));
            system.add_rhs(fi, &(ar.transpose() * omega * terms.e));
        }
        if let Some(fj) = fj {
            system.add_block(fj, fj, &(br.transpose() * omega * br));
            system.add_rhs(fj, &(br.transpose() * omega * terms.e));
        }
        if let (Some(fi), Some(fj)) = (fi, fj) {
            system.add_block(fi, fj, &(ar.transpose() * omega * br));
            system.add_block(fj, fi, &(br.transpose() * omega * ar));
        }
    }

    let gradient_norm = system.rhs_norm();
    ReducedSystem {
        system,
        free_index,
        gradient_norm,
    }
}

/// Outcome of one Gauss-Newton step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub graph: PoseGraph,
    pub step_norm: f64,
    pub gradient_norm: f64,
}

fn apply_step(
    graph: &PoseGraph,
    free_index: &[Option<usize>],
    steps: &[nalgebra::Vector3<f64>],
) -> (PoseGraph, f64) {
    let mut nodes = graph.nodes().to_vec();
    let mut norm_sq = 0.0;
    for (i, node) in nodes.iter_mut().enumerate() {
        if let Some(fi) = free_index[i] {
            let alpha = steps[fi];
            norm_sq += alpha.norm_squared();
            if alpha != nalgebra::Vector3::zeros() {
                let ambient = crate::manifold::AmbientTangent(node.tangent_basis() * alpha);
                *node = node
                    .exp_at(&ambient)
                    .expect("basis steps lie in the tangent plane")
                    .normalized()
                    .canonicalized();
            }
        }
    }
    (graph.with_nodes(nodes), norm_sq.sqrt())
}

/// One Gauss-Newton step with the configured anchor held fixed.
pub fn gn_step(graph: &PoseGraph, config: &SolverConfig) -> Result<StepOutcome, SolveError> {
    config.check(graph)?;
    if !graph.is_connected() {
        return Err(SolveError::Disconnected);
    }
    let reduced = assemble_reduced(graph, config.anchor_node);
    let steps = reduced
        .system
        .solve(config.damping)
        .map_err(|_| SolveError::LinearSolveFailure)?;
    let steps: Vec<_> = steps.iter().map(|s| -s).collect();
    let (next, step_norm) = apply_step(graph, &reduced.free_index, &steps);
    Ok(StepOutcome {
        graph: next,
        step_norm,
        gradient_norm: reduced.gradient_norm,
    })
}

// Ladder of extra damping retries after a failed factorization, each
// tenfold larger than the last.
const DAMPING_RETRIES: usize = 8;

/// Runs Gauss-Newton until the reduced gradient norm falls below
/// tolerance, `fixed_iterations` elapse, or `max_iterations` is hit.
///
/// Identical inputs produce bitwise-identical poses and reports (modulo
/// the wall-time column). A singular reduced system is retried with
/// escalating damping and otherwise ends the run with
/// `TerminationReason::LinearSolveFailure`.
pub fn optimize(
    graph: &PoseGraph,
    config: &SolverConfig,
) -> Result<(PoseGraph, SolverReport), SolveError> {
    config.check(graph)?;
    if graph.node_count() == 0 {
        return Err(SolveError::EmptyGraph);
    }
    if !graph.is_connected() {
        return Err(SolveError::Disconnected);
    }

    let mut current = graph.clone();
    let mut iterations = Vec::new();
    let mut termination = TerminationReason::IterationLimit;
    let limit = config.fixed_iterations.unwrap_or(config.max_iterations);

    for iteration in 0..limit {
        let start = Instant::now();
        let reduced = assemble_reduced(&current, config.anchor_node);

        if config.fixed_iterations.is_none()
            && reduced.gradient_norm < config.gradient_tolerance
        {
            termination = TerminationReason::GradientConverged;
            break;
        }

        let mut solution = reduced.system.solve(config.damping);
        if solution.is_err() {
            let mut damping = if config.damping > 0.0 {
                config.damping * 10.0
            } else {
                1e-9
            };
            for _ in 0..DAMPING_RETRIES {
                solution = reduced.system.solve(damping);
                if solution.is_ok() {
                    break;
                }
                damping *= 10.0;
            }
        }

        let Ok(steps) = solution else {
            iterations.push(IterationRecord {
                iteration,
                cost: total_cost(&current),
                gradient_norm: reduced.gradient_norm,
                step_norm: 0.0,
                millis: start.elapsed().as_secs_f64() * 1e3,
            });
            termination = TerminationReason::LinearSolveFailure;
            break;
        };

        let steps: Vec<_> = steps.iter().map(|s| -s).collect();
        let (next, step_norm) = apply_step(&current, &reduced.free_index, &steps);
        current = next;
        iterations.push(IterationRecord {
            iteration,
            cost: total_cost(&current),
            gradient_norm: reduced.gradient_norm,
            step_norm,
            millis: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    Ok((
        current,
        SolverReport {
            iterations,
            termination,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::InfoMatrix;
    use crate::manifold::AmbientTangent;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_pose(rng: &mut ChaCha20Rng) -> PlanarDualQuat {
        PlanarDualQuat::from_pose(
            rng.random_range(-2.0..2.0),
            Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
        )
        .unwrap()
    }

    fn random_info(rng: &mut ChaCha20Rng) -> InfoMatrix {
        let a = rng.random_range(0.5..3.0);
        let b = rng.random_range(0.5..3.0);
        let c = rng.random_range(0.5..3.0);
        InfoMatrix::from_upper_triangle([a, 0.1, -0.05, b, 0.1, c])
    }

    /// Connected random graph: a chain plus a few extra loop edges, with
    /// measurements perturbed away from consistency.
    fn random_graph(rng: &mut ChaCha20Rng, n: usize, extra: usize) -> PoseGraph {
        let nodes: Vec<_> = (0..n).map(|_| random_pose(rng)).collect();
        let mut edges = Vec::new();
        let mut push_edge = |rng: &mut ChaCha20Rng, i: usize, j: usize| {
            let true_rel = nodes[i].inverse().compose(&nodes[j]);
            let noise = PlanarDualQuat::from_pose(
                rng.random_range(-0.3..0.3),
                Vector2::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
            )
            .unwrap();
            edges.push(Edge::new(i, j, true_rel.compose(&noise), random_info(rng)));
        };
        for k in 1..n {
            push_edge(rng, k - 1, k);
        }
        for _ in 0..extra {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n);
            while j == i {
                j = rng.random_range(0..n);
            }
            push_edge(rng, i, j);
        }
        PoseGraph::new(nodes, edges).unwrap()
    }

    // ---- edge error ------------------------------------------------------

    #[test]
    fn consistent_edge_has_zero_error() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        for _ in 0..50 {
            let xi = random_pose(&mut rng);
            let xj = random_pose(&mut rng);
            let z = xi.inverse().compose(&xj);
            let e = edge_error(&xi, &xj, &z);
            assert_abs_diff_eq!(e.0, Vector3::zeros(), epsilon = 1e-10);
        }
    }

    #[test]
    fn error_at_identity_nodes_is_log_of_inverse_measurement() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let e_node = PlanarDualQuat::identity();
        for _ in 0..50 {
            let theta = rng.random_range(-2.0..2.0);
            let t = Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let z = PlanarDualQuat::from_pose(theta, t).unwrap();
            // SE(2) inverse oracle, then the identity-based log
            let rot = nalgebra::Rotation2::new(-theta);
            let z_inv = PlanarDualQuat::from_pose(-theta, -(rot * t)).unwrap();
            let expected = z_inv.log_identity();
            let got = edge_error(&e_node, &e_node, &z);
            assert_abs_diff_eq!(got.0, expected.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn error_is_invariant_under_representative_sign_flips() {
        let mut rng = ChaCha20Rng::seed_from_u64(43);
        for _ in 0..50 {
            let xi = random_pose(&mut rng);
            let xj = random_pose(&mut rng);
            let z = random_pose(&mut rng);
            let base = edge_error(&xi, &xj, &z);
            let flipped = edge_error(&xi.negated(), &xj, &z);
            assert_abs_diff_eq!(base.0, flipped.0, epsilon = 1e-12);
            let flipped = edge_error(&xi, &xj.negated(), &z.negated());
            assert_abs_diff_eq!(base.0, flipped.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn error_first_component_is_half_angular_residual() {
        let xi = PlanarDualQuat::identity();
        let xj = PlanarDualQuat::from_pose(0.8, Vector2::zeros()).unwrap();
        let z = PlanarDualQuat::from_pose(0.5, Vector2::zeros()).unwrap();
        let e = edge_error(&xi, &xj, &z);
        assert_abs_diff_eq!(e.0.x, (0.8 - 0.5) / 2.0, epsilon = 1e-12);
    }

    // ---- edge cost / total cost -----------------------------------------

    #[test]
    fn edge_cost_definition() {
        let xi = PlanarDualQuat::identity();
        let xj = PlanarDualQuat::identity();
        let z = PlanarDualQuat::identity();
        let edge = Edge::new(0, 1, z, InfoMatrix::identity());
        assert_eq!(edge_cost(&xi, &xj, &edge), 0.0);
    }

    #[test]
    fn edge_cost_matches_dense_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(44);
        for _ in 0..50 {
            let xi = random_pose(&mut rng);
            let xj = random_pose(&mut rng);
            let z = random_pose(&mut rng);
            let omega = random_info(&mut rng);
            let edge = Edge::new(0, 1, z, omega);
            let e = edge_error(&xi, &xj, &z).0;
            let dense: f64 = (0..3)
                .map(|r| {
                    (0..3)
                        .map(|c| 0.5 * e[r] * omega.matrix()[(r, c)] * e[c])
                        .sum::<f64>()
                })
                .sum();
            assert_abs_diff_eq!(edge_cost(&xi, &xj, &edge), dense, epsilon = 1e-12);
        }
    }

    #[test]
    fn total_cost_examples() {
        // consistent chain has zero cost
        let mut rng = ChaCha20Rng::seed_from_u64(45);
        let nodes: Vec<_> = (0..5).map(|_| random_pose(&mut rng)).collect();
        let edges: Vec<_> = (1..5)
            .map(|k| {
                Edge::new(
                    k - 1,
                    k,
                    nodes[k - 1].inverse().compose(&nodes[k]),
                    InfoMatrix::identity(),
                )
            })
            .collect();
        let g = PoseGraph::new(nodes, edges).unwrap();
        assert!(total_cost(&g) < 1e-20);

        // single edge with pure angular residual: e = (δ/2, 0, 0), so
        // eᵀΩe = δ²/4 with Ω = I; a unit first error component gives 1
        let xi = PlanarDualQuat::identity();
        let xj = PlanarDualQuat::from_pose(2.0, Vector2::zeros()).unwrap();
        let g = PoseGraph::new(
            vec![xi, xj],
            vec![Edge::new(0, 1, PlanarDualQuat::identity(), InfoMatrix::identity())],
        )
        .unwrap();
        let e = edge_error(&xi, &xj, &PlanarDualQuat::identity()).0;
        assert_abs_diff_eq!(e.x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(total_cost(&g), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn total_cost_is_twice_sum_of_edge_costs() {
        let mut rng = ChaCha20Rng::seed_from_u64(46);
        let g = random_graph(&mut rng, 6, 3);
        let sum: f64 = g
            .edges()
            .iter()
            .map(|e| edge_cost(g.node(e.i), g.node(e.j), e))
            .sum();
        assert_abs_diff_eq!(total_cost(&g), 2.0 * sum, epsilon = 1e-10);
    }

    // ---- Jacobians ---------------------------------------------------------

    /// Central finite differences of the edge error in ambient
    /// coordinates of one endpoint.
    fn fd_jacobian(
        x_i: &PlanarDualQuat,
        x_j: &PlanarDualQuat,
        z: &PlanarDualQuat,
        wrt_i: bool,
    ) -> SMatrix<f64, 3, 4> {
        let step = 1e-6;
        let mut out = SMatrix::<f64, 3, 4>::zeros();
        for col in 0..4 {
            let perturb = |sign: f64| {
                let mut vi = x_i.coords();
                let mut vj = x_j.coords();
                if wrt_i {
                    vi[col] += sign * step;
                } else {
                    vj[col] += sign * step;
                }
                let qi = PlanarDualQuat::from_raw_unchecked(vi);
                let qj = PlanarDualQuat::from_raw_unchecked(vj);
                edge_error(&qi, &qj, z).0
            };
            let d = (perturb(1.0) - perturb(-1.0)) / (2.0 * step);
            out.set_column(col, &d);
        }
        out
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(47);
        for _ in 0..100 {
            let xi = random_pose(&mut rng);
            let xj = random_pose(&mut rng);
            let z = random_pose(&mut rng);
            let (a, b) = edge_jacobians(&xi, &xj, &z);
            let fa = fd_jacobian(&xi, &xj, &z, true);
            let fb = fd_jacobian(&xi, &xj, &z, false);
            let scale_a = a.norm().max(1.0);
            let scale_b = b.norm().max(1.0);
            assert!(
                (a - fa).norm() / scale_a < 1e-5,
                "A mismatch: {a} vs {fa}"
            );
            assert!(
                (b - fb).norm() / scale_b < 1e-5,
                "B mismatch: {b} vs {fb}"
            );
        }
    }

    #[test]
    fn jacobian_at_identity_restricted_to_basis() {
        // at a consistent identity edge, the residual in tangent-basis
        // coordinates of x_j moves one-for-one: B·basis = I, which is the
        // small-angle transform (β = 1, α = 0) applied to basis moves of
        // twice the pose-parameter scale
        let e = PlanarDualQuat::identity();
        let (a, b) = edge_jacobians(&e, &e, &e);
        let basis = e.tangent_basis();
        let restricted: Matrix3<f64> = b * basis;
        assert_abs_diff_eq!(restricted, Matrix3::identity(), epsilon = 1e-12);
        let restricted_a: Matrix3<f64> = a * basis;
        assert_abs_diff_eq!(restricted_a, -Matrix3::identity(), epsilon = 1e-12);
        // cross-check against finite differences
        let fb = fd_jacobian(&e, &e, &e, false);
        assert_abs_diff_eq!(b, fb, epsilon = 1e-6);
    }

    #[test]
    fn jacobian_kills_radial_direction_after_projection() {
        let mut rng = ChaCha20Rng::seed_from_u64(48);
        for _ in 0..20 {
            let xi = random_pose(&mut rng);
            let xj = random_pose(&mut rng);
            let z = random_pose(&mut rng);
            let (a, _) = edge_jacobians(&xi, &xj, &z);
            let radial = Vector4::new(xi.coords().x, xi.coords().y, 0.0, 0.0);
            let ap = a * xi.tangent_projection();
            assert_abs_diff_eq!(ap * radial, Vector3::zeros(), epsilon = 1e-12);
        }
    }

    // ---- small-angle adaptation ------------------------------------------

    #[test]
    fn small_angle_examples() {
        let t = adapt_error_small_angle(Vector3::new(0.0, 2.0, -4.0));
        assert_eq!(t.0, Vector3::new(0.0, 1.0, -2.0));

        let quarter = PI / 4.0;
        let t = adapt_error_small_angle(Vector3::new(FRAC_PI_2, 2.0, 0.0));
        assert_abs_diff_eq!(
            t.0,
            Vector3::new(quarter, quarter, -quarter),
            epsilon = 1e-12
        );
    }

    #[test]
    fn small_angle_matches_log_of_pose() {
        let mut rng = ChaCha20Rng::seed_from_u64(49);
        for _ in 0..1000 {
            let delta = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let direct = PlanarDualQuat::from_pose(delta.x, Vector2::new(delta.y, delta.z))
                .unwrap()
                .log_identity();
            let adapted = adapt_error_small_angle(delta);
            assert_abs_diff_eq!(adapted.0, direct.0, epsilon = 1e-12);
        }
    }

    // ---- gradient -----------------------------------------------------------

    #[test]
    fn gradient_vanishes_at_global_optimum() {
        let mut rng = ChaCha20Rng::seed_from_u64(50);
        let nodes: Vec<_> = (0..6).map(|_| random_pose(&mut rng)).collect();
        let edges: Vec<_> = (1..6)
            .map(|k| {
                Edge::new(
                    k - 1,
                    k,
                    nodes[k - 1].inverse().compose(&nodes[k]),
                    random_info(&mut rng),
                )
            })
            .collect();
        let g = PoseGraph::new(nodes, edges).unwrap();
        for block in riemannian_gradient(&g) {
            assert_abs_diff_eq!(block, Vector4::zeros(), epsilon = 1e-10);
        }
    }

    #[test]
    fn single_edge_gradient_block_matches_projected_formula() {
        let mut rng = ChaCha20Rng::seed_from_u64(51);
        let xi = random_pose(&mut rng);
        let xj = random_pose(&mut rng);
        let z = random_pose(&mut rng);
        let omega = random_info(&mut rng);
        let g = PoseGraph::new(vec![xi, xj], vec![Edge::new(0, 1, z, omega)]).unwrap();
        let grad = riemannian_gradient(&g);

        let e = edge_error(&xi, &xj, &z).0;
        let (a, b) = edge_jacobians(&xi, &xj, &z);
        let expected_i = xi.tangent_projection() * a.transpose() * omega.matrix() * e;
        let expected_j = xj.tangent_projection() * b.transpose() * omega.matrix() * e;
        assert_abs_diff_eq!(grad[0], expected_i, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[1], expected_j, epsilon = 1e-12);
    }

    #[test]
    fn gradient_blocks_lie_in_tangent_planes() {
        let mut rng = ChaCha20Rng::seed_from_u64(52);
        let g = random_graph(&mut rng, 7, 4);
        for (i, block) in riemannian_gradient(&g).iter().enumerate() {
            let p = g.node(i).tangent_projection();
            assert_abs_diff_eq!(p * block, *block, epsilon = 1e-12);
        }
    }

    /// Directional derivative of `total_cost` through the exponential
    /// retraction along one tangent-basis direction of one node.
    fn fd_directional(g: &PoseGraph, node: usize, dir: usize) -> f64 {
        let step = 1e-6;
        let eval = |sign: f64| {
            let mut coords = Vector3::zeros();
            coords[dir] = sign * step;
            let basis = g.node(node).tangent_basis();
            let moved = g
                .node(node)
                .exp_at(&AmbientTangent(basis * coords))
                .unwrap();
            let mut nodes = g.nodes().to_vec();
            nodes[node] = moved;
            total_cost(&g.with_nodes(nodes))
        };
        (eval(1.0) - eval(-1.0)) / (2.0 * step)
    }

    #[test]
    fn gradient_matches_finite_differences_through_retraction() {
        let mut rng = ChaCha20Rng::seed_from_u64(53);
        for _ in 0..10 {
            let g = random_graph(&mut rng, 5, 3);
            let grad = riemannian_gradient(&g);
            for node in 0..g.node_count() {
                let basis = g.node(node).tangent_basis();
                let reduced = basis.transpose() * grad[node];
                for dir in 0..3 {
                    // total_cost is Σ eᵀΩe = 2 Σ f_ij, so its derivative is
                    // twice the f-scaled gradient coordinate
                    let fd = fd_directional(&g, node, dir) / 2.0;
                    let scale = reduced[dir].abs().max(1.0);
                    assert!(
                        (reduced[dir] - fd).abs() / scale < 1e-5,
                        "node {node} dir {dir}: {} vs {}",
                        reduced[dir],
                        fd
                    );
                }
            }
        }
    }

    // ---- Hessian -------------------------------------------------------------

    #[test]
    fn single_edge_hessian_has_exactly_the_four_projected_blocks() {
        let mut rng = ChaCha20Rng::seed_from_u64(54);
        let xi = random_pose(&mut rng);
        let xj = random_pose(&mut rng);
        let z = random_pose(&mut rng);
        let omega = random_info(&mut rng);
        let g = PoseGraph::new(vec![xi, xj], vec![Edge::new(0, 1, z, omega)]).unwrap();
        let h = hessian_blocks(&g);
        assert_eq!(h.occupied().count(), 4);

        let (a, b) = edge_jacobians(&xi, &xj, &z);
        let pi = xi.tangent_projection();
        let pj = xj.tangent_projection();
        let om = omega.matrix();
        let hii = pi * a.transpose() * om * a * pi.transpose();
        let hij = pi * a.transpose() * om * b * pj.transpose();
        let hji = pj * b.transpose() * om * a * pi.transpose();
        let hjj = pj * b.transpose() * om * b * pj.transpose();
        assert_abs_diff_eq!(*h.block(0, 0).unwrap(), hii, epsilon = 1e-12);
        assert_abs_diff_eq!(*h.block(0, 1).unwrap(), hij, epsilon = 1e-12);
        assert_abs_diff_eq!(*h.block(1, 0).unwrap(), hji, epsilon = 1e-12);
        assert_abs_diff_eq!(*h.block(1, 1).unwrap(), hjj, epsilon = 1e-12);
    }

    #[test]
    fn hessian_is_symmetric_and_psd() {
        let mut rng = ChaCha20Rng::seed_from_u64(55);
        for _ in 0..10 {
            let g = random_graph(&mut rng, 5, 3);
            let dense = hessian_blocks(&g).to_dense();
            assert_abs_diff_eq!(dense.clone(), dense.transpose(), epsilon = 1e-12);
            let eig = dense.symmetric_eigenvalues();
            assert!(
                eig.iter().all(|&l| l > -1e-9),
                "negative eigenvalue: {}",
                eig.min()
            );
        }
    }

    #[test]
    fn hessian_sparsity_follows_graph_adjacency() {
        let mut rng = ChaCha20Rng::seed_from_u64(56);
        let g = random_graph(&mut rng, 6, 2);
        let h = hessian_blocks(&g);
        for (bi, bj) in h.occupied() {
            let adjacent = bi == bj
                || g.edges()
                    .iter()
                    .any(|e| (e.i == bi && e.j == bj) || (e.i == bj && e.j == bi));
            assert!(adjacent, "block ({bi},{bj}) off the adjacency pattern");
        }
    }

    #[test]
    fn reduced_system_agrees_with_projected_hessian() {
        // the tangent-basis-reduced normal matrix must equal Bᵀ H B
        let mut rng = ChaCha20Rng::seed_from_u64(57);
        let g = random_graph(&mut rng, 5, 2);
        let anchor = 0usize;
        let reduced = assemble_reduced(&g, anchor);
        let h = hessian_blocks(&g).to_dense();
        let n = g.node_count();
        for bi in 0..n {
            for bj in 0..n {
                let (Some(fi), Some(fj)) = (reduced.free_index[bi], reduced.free_index[bj])
                else {
                    continue;
                };
                let hb = h.view((bi * 4, bj * 4), (4, 4));
                let expected = g.node(bi).tangent_basis().transpose()
                    * hb
                    * g.node(bj).tangent_basis();
                let got = reduced
                    .system
                    .block_for_test(fi, fj)
                    .unwrap_or_else(Matrix3::zeros);
                assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
            }
        }
    }

    // ---- gn_step --------------------------------------------------------------

    #[test]
    fn step_at_optimum_is_zero_and_leaves_poses_untouched() {
        let mut rng = ChaCha20Rng::seed_from_u64(58);
        let nodes: Vec<_> = (0..5).map(|_| random_pose(&mut rng)).collect();
        let edges: Vec<_> = (1..5)
            .map(|k| {
                Edge::new(
                    k - 1,
                    k,
                    nodes[k - 1].inverse().compose(&nodes[k]),
                    InfoMatrix::identity(),
                )
            })
            .collect();
        let g = PoseGraph::new(nodes.clone(), edges).unwrap();
        let out = gn_step(&g, &SolverConfig::default()).unwrap();
        assert!(out.step_norm < 1e-12);
        for (a, b) in out.graph.nodes().iter().zip(&nodes) {
            assert_abs_diff_eq!(a.coords(), b.coords(), epsilon = 1e-12);
        }
    }

    #[test]
    fn two_node_problem_solves_in_one_step() {
        let mut rng = ChaCha20Rng::seed_from_u64(59);
        for _ in 0..50 {
            let x0 = random_pose(&mut rng);
            let x1 = random_pose(&mut rng);
            let z = random_pose(&mut rng);
            let g = PoseGraph::new(
                vec![x0, x1],
                vec![Edge::new(0, 1, z, random_info(&mut rng))],
            )
            .unwrap();
            let out = gn_step(&g, &SolverConfig::default()).unwrap();
            assert!(
                total_cost(&out.graph) < 1e-18,
                "cost after one step: {}",
                total_cost(&out.graph)
            );
            let expected = x0.compose(&z);
            assert_abs_diff_eq!(
                out.graph.node(1).coords(),
                expected.coords(),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn step_is_a_descent_direction() {
        let mut rng = ChaCha20Rng::seed_from_u64(60);
        for _ in 0..20 {
            let g = random_graph(&mut rng, 6, 3);
            let cfg = SolverConfig::default();
            let reduced = assemble_reduced(&g, cfg.anchor_node);
            let steps = reduced.system.solve(0.0).unwrap();
            // gradient is the rhs; the Newton step -H⁻¹g must oppose it
            let mut inner = 0.0;
            for (fi, s) in steps.iter().enumerate() {
                inner += (-s).dot(&reduced.system.rhs_for_test(fi));
            }
            assert!(inner < 0.0, "step is not a descent direction: {inner}");
        }
    }

    #[test]
    fn anchor_node_never_moves() {
        let mut rng = ChaCha20Rng::seed_from_u64(61);
        let g = random_graph(&mut rng, 6, 3);
        for anchor in [0usize, 3, 5] {
            let cfg = SolverConfig {
                anchor_node: anchor,
                ..SolverConfig::default()
            };
            let out = gn_step(&g, &cfg).unwrap();
            assert_eq!(
                out.graph.node(anchor).coords(),
                g.node(anchor).coords(),
                "anchor {anchor} moved"
            );
        }
    }

    // ---- optimize -----------------------------------------------------------

    #[test]
    fn optimize_converges_on_perturbed_chain() {
        let mut rng = ChaCha20Rng::seed_from_u64(62);
        let g = random_graph(&mut rng, 8, 5);
        let (opt, report) = optimize(&g, &SolverConfig::default()).unwrap();
        assert_eq!(report.termination, TerminationReason::GradientConverged);
        assert!(total_cost(&opt) <= total_cost(&g));
        // at convergence the reduced gradient is tiny
        let reduced = assemble_reduced(&opt, 0);
        assert!(reduced.gradient_norm < 1e-6);
    }

    #[test]
    fn optimize_is_idempotent_at_convergence() {
        let mut rng = ChaCha20Rng::seed_from_u64(63);
        let g = random_graph(&mut rng, 6, 4);
        let (opt, _) = optimize(&g, &SolverConfig::default()).unwrap();
        let (again, report) = optimize(&opt, &SolverConfig::default()).unwrap();
        assert!(report.iterations.len() <= 1);
        for (a, b) in opt.nodes().iter().zip(again.nodes()) {
            assert!((a.coords() - b.coords()).norm() < 1e-9);
        }
    }

    #[test]
    fn optimize_respects_fixed_iterations() {
        let mut rng = ChaCha20Rng::seed_from_u64(64);
        let g = random_graph(&mut rng, 6, 3);
        let cfg = SolverConfig {
            fixed_iterations: Some(4),
            ..SolverConfig::default()
        };
        let (_, report) = optimize(&g, &cfg).unwrap();
        assert_eq!(report.iterations.len(), 4);
        assert_eq!(report.termination, TerminationReason::IterationLimit);
    }

    #[test]
    fn optimize_is_bitwise_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(65);
        let g = random_graph(&mut rng, 7, 4);
        let cfg = SolverConfig {
            fixed_iterations: Some(5),
            ..SolverConfig::default()
        };
        let (a, ra) = optimize(&g, &cfg).unwrap();
        let (b, rb) = optimize(&g, &cfg).unwrap();
        for (na, nb) in a.nodes().iter().zip(b.nodes()) {
            for k in 0..4 {
                assert_eq!(na.coords()[k].to_bits(), nb.coords()[k].to_bits());
            }
        }
        for (ia, ib) in ra.iterations.iter().zip(&rb.iterations) {
            assert_eq!(ia.cost.to_bits(), ib.cost.to_bits());
            assert_eq!(ia.gradient_norm.to_bits(), ib.gradient_norm.to_bits());
            assert_eq!(ia.step_norm.to_bits(), ib.step_norm.to_bits());
        }
    }

    #[test]
    fn optimize_rejects_disconnected_graphs() {
        let nodes = vec![
            PlanarDualQuat::identity(),
            PlanarDualQuat::identity(),
            PlanarDualQuat::identity(),
        ];
        let g = PoseGraph::new(
            nodes,
            vec![Edge::new(
                0,
                1,
                PlanarDualQuat::identity(),
                InfoMatrix::identity(),
            )],
        )
        .unwrap();
        assert!(matches!(
            optimize(&g, &SolverConfig::default()),
            Err(SolveError::Disconnected)
        ));
    }

    #[test]
    fn optimize_rejects_bad_anchor() {
        let g = PoseGraph::new(
            vec![PlanarDualQuat::identity(), PlanarDualQuat::identity()],
            vec![Edge::new(
                0,
                1,
                PlanarDualQuat::identity(),
                InfoMatrix::identity(),
            )],
        )
        .unwrap();
        let cfg = SolverConfig {
            anchor_node: 7,
            ..SolverConfig::default()
        };
        assert!(matches!(
            optimize(&g, &cfg),
            Err(SolveError::AnchorOutOfRange { anchor: 7, nodes: 2 })
        ));
    }

    // ---- invariances -----------------------------------------------------------

    #[test]
    fn cost_is_gauge_invariant_under_left_composition() {
        let mut rng = ChaCha20Rng::seed_from_u64(66);
        for _ in 0..10 {
            let g = random_graph(&mut rng, 6, 3);
            let shift = random_pose(&mut rng);
            let moved: Vec<_> = g.nodes().iter().map(|x| shift.compose(x)).collect();
            let shifted = g.with_nodes(moved);
            assert_abs_diff_eq!(total_cost(&g), total_cost(&shifted), epsilon = 1e-10);
            for (e1, e2) in g.edges().iter().zip(shifted.edges()) {
                let a = edge_error(g.node(e1.i), g.node(e1.j), &e1.z);
                let b = edge_error(shifted.node(e2.i), shifted.node(e2.j), &e2.z);
                assert_abs_diff_eq!(a.0, b.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn cost_is_invariant_under_node_sign_flips() {
        let mut rng = ChaCha20Rng::seed_from_u64(67);
        for _ in 0..10 {
            let g = random_graph(&mut rng, 6, 3);
            let base = total_cost(&g);
            let flipped: Vec<_> = g
                .nodes()
                .iter()
                .map(|x| {
                    if rng.random_range(0..2) == 1 {
                        x.negated()
                    } else {
                        *x
                    }
                })
                .collect();
            let g2 = g.with_nodes(flipped);
            assert_abs_diff_eq!(base, total_cost(&g2), epsilon = 1e-12);
        }
    }

    #[test]
    fn solver_report_csv_has_expected_header() {
        let mut rng = ChaCha20Rng::seed_from_u64(68);
        let g = random_graph(&mut rng, 4, 2);
        let cfg = SolverConfig {
            fixed_iterations: Some(2),
            ..SolverConfig::default()
        };
        let (_, report) = optimize(&g, &cfg).unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with("iter,cost,grad_norm,step_norm,millis\n"));
        assert_eq!(csv.lines().count(), 3);
    }
}
