//! Shared fixtures for the integration suites.

use psmas::graph::{build_graph, AgentProfile, DependencyGraph};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random DAG on 2..=8 agents: edges only run from lower to higher index, so
/// acyclicity holds by construction and every draw builds.
pub fn random_dag(rng: &mut ChaCha8Rng) -> DependencyGraph {
    let n = rng.random_range(2..=8);
    let agents: Vec<AgentProfile> = (1..=n)
        .map(|k| {
            AgentProfile::new(
                format!("A{k}"),
                rng.random_range(0.2..3.0),
                rng.random_range(200..2000),
                rng.random_range(50..400),
            )
        })
        .collect();
    let mut edges = Vec::new();
    for i in 1..=n {
        for j in (i + 1)..=n {
            if rng.random_bool(0.35) {
                edges.push((format!("A{i}"), format!("A{j}")));
            }
        }
    }
    build_graph(agents, edges).unwrap()
}
