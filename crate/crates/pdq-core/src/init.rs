//! Odometry initialization: rebuild node poses by integrating measured
//! edges outward from the anchor.
//!
//! Sequential edges `⟨i, i+1⟩` are integrated first, in index order, so
//! graphs with a full odometry chain reproduce plain dead reckoning.
//! Nodes not reachable that way are filled in over a spanning tree of
//! the remaining edges (lowest edge index first).

use crate::graph::PoseGraph;
use crate::manifold::PlanarDualQuat;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InitError {
    #[error("anchor node {anchor} out of range (node count {nodes})")]
    AnchorOutOfRange { anchor: usize, nodes: usize },
    #[error("graph is disconnected; {unreached} nodes unreachable from the anchor")]
    Disconnected { unreached: usize },
}

/// Integrated poses, anchored at the current pose of `anchor`.
pub fn odometry_poses(
    graph: &PoseGraph,
    anchor: usize,
) -> Result<Vec<PlanarDualQuat>, InitError> {
    let n = graph.node_count();
    if anchor >= n {
        return Err(InitError::AnchorOutOfRange { anchor, nodes: n });
    }

    // first forward sequential edge (i, i+1) or its reverse, per gap
    let mut seq_forward: Vec<Option<usize>> = vec![None; n.saturating_sub(1)];
    let mut seq_reverse: Vec<Option<usize>> = vec![None; n.saturating_sub(1)];
    for (k, e) in graph.edges().iter().enumerate() {
        if e.j == e.i + 1 && seq_forward[e.i].is_none() {
            seq_forward[e.i] = Some(k);
        }
        if e.i == e.j + 1 && seq_reverse[e.j].is_none() {
            seq_reverse[e.j] = Some(k);
        }
    }

    let mut poses = vec![PlanarDualQuat::identity(); n];
    let mut visited = vec![false; n];
    poses[anchor] = *graph.node(anchor);
    visited[anchor] = true;

    let sweep = |poses: &mut Vec<PlanarDualQuat>, visited: &mut Vec<bool>| -> bool {
        let mut changed = false;
        // forward: x_{k+1} = x_k ⊞ z_{k,k+1}
        for k in 0..n.saturating_sub(1) {
            if visited[k] && !visited[k + 1] {
                if let Some(idx) = seq_forward[k] {
                    poses[k + 1] = poses[k].compose(&graph.edges()[idx].z);
                    visited[k + 1] = true;
                    changed = true;
                } else if let Some(idx) = seq_reverse[k] {
                    poses[k + 1] = poses[k].compose(&graph.edges()[idx].z.inverse());
                    visited[k + 1] = true;
                    changed = true;
                }
            }
        }
        // backward: x_k = x_{k+1} ⊞ z_{k,k+1}⁻¹
        for k in (0..n.saturating_sub(1)).rev() {
            if visited[k + 1] && !visited[k] {
                if let Some(idx) = seq_forward[k] {
                    poses[k] = poses[k + 1].compose(&graph.edges()[idx].z.inverse());
                    visited[k] = true;
                    changed = true;
                } else if let Some(idx) = seq_reverse[k] {
                    poses[k] = poses[k + 1].compose(&graph.edges()[idx].z);
                    visited[k] = true;
                    changed = true;
                }
            }
        }
        changed
    };

    loop {
        while sweep(&mut poses, &mut visited) {}
        if visited.iter().all(|&v| v) {
            break;
        }
        // spanning-tree fallback: bridge one gap with the first edge
        // joining the visited set to the rest, then resume sweeping
        let mut bridged = false;
        for e in graph.edges() {
            if visited[e.i] && !visited[e.j] {
                poses[e.j] = poses[e.i].compose(&e.z);
                visited[e.j] = true;
                bridged = true;
                break;
            }
            if visited[e.j] && !visited[e.i] {
                poses[e.i] = poses[e.j].compose(&e.z.inverse());
                visited[e.i] = true;
                bridged = true;
                break;
            }
        }
        if !bridged {
            let unreached = visited.iter().filter(|&&v| !v).count();
            return Err(InitError::Disconnected { unreached });
        }
    }

    Ok(poses)
}

/// The graph with nodes replaced by the odometry integration.
pub fn odometry_initialized(graph: &PoseGraph, anchor: usize) -> Result<PoseGraph, InitError> {
    Ok(graph.with_nodes(odometry_poses(graph, anchor)?))
}
