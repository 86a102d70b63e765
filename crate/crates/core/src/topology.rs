//! Cluster hierarchy and the locality-level relation between task types and
//! servers.
//!
//! The cluster is a balanced tree described by `branching`: the number of
//! children at each tier from the top down (e.g. `[2, 2, 3]` is 2 super racks,
//! 2 racks each, 3 servers per rack, 12 servers total). A task is 1-local to
//! the servers holding its data replicas; otherwise its level is 1 plus the
//! number of trailing tree tiers separating the server from the nearest
//! replica, capped at `levels`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("branching must be non-empty with positive entries, got {0:?}")]
    InvalidBranching(Vec<usize>),
    #[error("levels must be at least 1, got {0}")]
    InvalidLevels(usize),
    #[error("server index {server} out of range 1..={servers}")]
    ServerOutOfRange { server: usize, servers: usize },
    #[error("level {level} out of range 1..={levels}")]
    LevelOutOfRange { level: usize, levels: usize },
    #[error("invalid task type: {0}")]
    InvalidType(String),
    #[error("replica count {d} out of range 1..={servers}")]
    InvalidReplicaCount { d: usize, servers: usize },
}

/// Balanced-tree cluster layout. Immutable once built; server indices are
/// 1-based throughout the public API.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterTopology {
    branching: Vec<usize>,
    levels: usize,
    servers: usize,
    /// suffix_prod[i] = product of branching[i..]; used to decompose a server
    /// index into its path of tree components.
    #[serde(skip)]
    suffix_prod: Vec<usize>,
}

impl ClusterTopology {
    /// Builds a topology with an explicit level count. `levels` caps the
    /// locality level; the non-degenerate choice is `branching.len() + 1`.
    pub fn new(branching: Vec<usize>, levels: usize) -> Result<Self, TopologyError> {
        if branching.is_empty() || branching.iter().any(|&b| b == 0) {
            return Err(TopologyError::InvalidBranching(branching));
        }
        if levels == 0 {
            return Err(TopologyError::InvalidLevels(levels));
        }
        let servers = branching.iter().product();
        let suffix_prod = Self::suffix_products(&branching);
        Ok(Self { branching, levels, servers, suffix_prod })
    }

    /// Builds a topology with the full level count `branching.len() + 1`.
    pub fn balanced(branching: Vec<usize>) -> Result<Self, TopologyError> {
        let levels = branching.len() + 1;
        Self::new(branching, levels)
    }

    fn suffix_products(branching: &[usize]) -> Vec<usize> {
        let mut p = vec![1usize; branching.len() + 1];
        for i in (0..branching.len()).rev() {
            p[i] = p[i + 1] * branching[i];
        }
        p
    }

    pub fn branching(&self) -> &[usize] {
        &self.branching
    }

    /// N, the number of locality levels.
    pub fn levels(&self) -> usize {
        self.levels
    }

    /// M, the number of servers.
    pub fn servers(&self) -> usize {
        self.servers
    }

    pub fn check_server(&self, server: usize) -> Result<(), TopologyError> {
        if server == 0 || server > self.servers {
            return Err(TopologyError::ServerOutOfRange { server, servers: self.servers });
        }
        Ok(())
    }

    /// Number of trailing tree tiers on which the paths of two servers
    /// differ; 0 iff they are the same server.
    fn tier_distance(&self, a: usize, b: usize) -> usize {
        let tiers = self.branching.len();
        let (ai, bi) = (a - 1, b - 1);
        for i in 0..tiers {
            let ca = (ai / self.suffix_prod[i + 1]) % self.branching[i];
            let cb = (bi / self.suffix_prod[i + 1]) % self.branching[i];
            if ca != cb {
                return tiers - i;
            }
        }
        0
    }

    /// Locality level of `server` for a task of type `ty`: 1 if the server
    /// holds a replica, else 1 + distance to the nearest replica, capped at N.
    pub fn level(&self, ty: &TaskType, server: usize) -> Result<usize, TopologyError> {
        self.check_server(server)?;
        ty.check_against(self)?;
        if ty.locals.binary_search(&server).is_ok() {
            return Ok(1);
        }
        let nearest = ty
            .locals
            .iter()
            .map(|&l| self.tier_distance(server, l))
            .min()
            .expect("task type has at least one local server");
        Ok((1 + nearest).min(self.levels))
    }

    /// All servers at exactly level `n` for type `ty`. The sets over
    /// n = 1..=N partition 1..=M.
    pub fn local_set(&self, ty: &TaskType, n: usize) -> Result<Vec<usize>, TopologyError> {
        if n == 0 || n > self.levels {
            return Err(TopologyError::LevelOutOfRange { level: n, levels: self.levels });
        }
        ty.check_against(self)?;
        let mut out = Vec::new();
        for m in 1..=self.servers {
            if self.level(ty, m)? == n {
                out.push(m);
            }
        }
        Ok(out)
    }

    /// All C(M, d) task types in lexicographic order.
    pub fn enumerate_types(&self, d: usize) -> Result<Vec<TaskType>, TopologyError> {
        if d == 0 || d > self.servers {
            return Err(TopologyError::InvalidReplicaCount { d, servers: self.servers });
        }
        let combos = itertools::Itertools::combinations(1..=self.servers, d);
        Ok(combos.map(|locals| TaskType { locals }).collect())
    }
}

/// A task type: the ordered tuple of servers holding the data replicas.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskType {
    locals: Vec<usize>,
}

impl TaskType {
    /// `locals` must be strictly increasing, 1-based server indices.
    pub fn new(locals: Vec<usize>) -> Result<Self, TopologyError> {
        if locals.is_empty() {
            return Err(TopologyError::InvalidType("empty local set".into()));
        }
        if locals[0] == 0 {
            return Err(TopologyError::InvalidType("server indices are 1-based".into()));
        }
        if locals.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TopologyError::InvalidType(format!(
                "local servers must be strictly increasing, got {locals:?}"
            )));
        }
        Ok(Self { locals })
    }

    pub fn locals(&self) -> &[usize] {
        &self.locals
    }

    pub fn replicas(&self) -> usize {
        self.locals.len()
    }

    fn check_against(&self, topo: &ClusterTopology) -> Result<(), TopologyError> {
        let last = *self.locals.last().expect("non-empty");
        topo.check_server(last)
    }
}

impl std::fmt::Display for TaskType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, m) in self.locals.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{m}")?;
        }
        write!(f, ")")
    }
}

/// Index of a task type in a [`TypeCatalog`].
pub type TypeId = usize;

/// Precomputed (type, server) locality table for one topology, shared by the
/// engine and the policies so levels are not recomputed in inner loops.
#[derive(Debug, Clone)]
pub struct TypeCatalog {
    types: Vec<TaskType>,
    /// levels[type_id][m - 1]
    levels: Vec<Vec<u8>>,
    servers: usize,
    level_count: usize,
}

impl TypeCatalog {
    pub fn new(topo: &ClusterTopology, types: Vec<TaskType>) -> Result<Self, TopologyError> {
        let mut levels = Vec::with_capacity(types.len());
        for ty in &types {
            let mut row = Vec::with_capacity(topo.servers());
            for m in 1..=topo.servers() {
                row.push(topo.level(ty, m)? as u8);
            }
            levels.push(row);
        }
        Ok(Self { types, levels, servers: topo.servers(), level_count: topo.levels() })
    }

    /// Catalog over all C(M, d) types.
    pub fn all_types(topo: &ClusterTopology, d: usize) -> Result<Self, TopologyError> {
        Self::new(topo, topo.enumerate_types(d)?)
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn types(&self) -> &[TaskType] {
        &self.types
    }

    pub fn task_type(&self, id: TypeId) -> &TaskType {
        &self.types[id]
    }

    pub fn servers(&self) -> usize {
        self.servers
    }

    pub fn level_count(&self) -> usize {
        self.level_count
    }

    /// Locality level of `server` (1-based) for type `id`.
    pub fn level_of(&self, id: TypeId, server: usize) -> usize {
        self.levels[id][server - 1] as usize
    }
}
