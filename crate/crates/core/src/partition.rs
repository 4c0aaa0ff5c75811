//! Node assignments over two data pools.
//!
//! Node 0 is the server; clients are numbered from 1.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mae::Domain;
use crate::rng::SeededRng;

pub const SERVER_NODE: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPool {
    pub domain: Domain,
    ids: Vec<u64>,
}

impl DatasetPool {
    pub fn new(domain: Domain, ids: Vec<u64>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::invalid(format!(
                "duplicate sample id {dup} in pool {}",
                domain.tag()
            )));
        }
        Ok(DatasetPool { domain, ids })
    }

    /// A pool of the consecutive ids `start..start + len`.
    pub fn range(domain: Domain, start: u64, len: usize) -> Self {
        DatasetPool {
            domain,
            ids: (start..start + len as u64).collect(),
        }
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn check_disjoint(a: &DatasetPool, b: &DatasetPool) -> Result<()> {
    let ids: HashSet<u64> = a.ids.iter().copied().collect();
    if let Some(id) = b.ids.iter().find(|id| ids.contains(id)) {
        return Err(Error::invalid(format!("sample id {id} appears in both pools")));
    }
    Ok(())
}

/// Sample ids held by every node, plus whatever was left unassigned.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitAssignment {
    pub server: Vec<u64>,
    pub clients: Vec<Vec<u64>>,
    pub leftover: Vec<u64>,
}

impl SplitAssignment {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.clients.len() + 1
    }

    /// Ids held by `node` (0 = server).
    pub fn node(&self, node: u32) -> Option<&[u64]> {
        if node == SERVER_NODE {
            Some(&self.server)
        } else {
            self.clients.get(node as usize - 1).map(|v| v.as_slice())
        }
    }

    pub fn node_sizes(&self) -> Vec<usize> {
        std::iter::once(self.server.len())
            .chain(self.clients.iter().map(Vec::len))
            .collect()
    }

    /// Checks the split against the pools it was drawn from: node lists
    /// pairwise disjoint, nothing lost or invented, and a non-empty server.
    pub fn validate(&self, pools: &[&DatasetPool]) -> Result<()> {
        if self.server.is_empty() {
            return Err(Error::invalid("server shard is empty"));
        }
        let mut seen = HashSet::new();
        for id in self
            .server
            .iter()
            .chain(self.clients.iter().flatten())
            .chain(&self.leftover)
        {
            if !seen.insert(*id) {
                return Err(Error::invalid(format!("sample id {id} assigned twice")));
            }
        }
        let universe: HashSet<u64> = pools.iter().flat_map(|p| p.ids.iter().copied()).collect();
        if seen != universe {
            return Err(Error::invalid("split does not cover exactly the pooled ids"));
        }
        Ok(())
    }

    /// Plain-text audit manifest: one `node-id: ids…` line per node, then
    /// `leftover: ids…`.
    pub fn to_manifest(&self) -> String {
        let mut out = String::from("# ffm split manifest v1\n");
        let line = |out: &mut String, label: &str, ids: &[u64]| {
            out.push_str(label);
            out.push(':');
            for id in ids {
                let _ = write!(out, " {id}");
            }
            out.push('\n');
        };
        line(&mut out, "0", &self.server);
        for (i, ids) in self.clients.iter().enumerate() {
            line(&mut out, &(i + 1).to_string(), ids);
        }
        line(&mut out, "leftover", &self.leftover);
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut nodes: Vec<(u32, Vec<u64>)> = Vec::new();
        let mut leftover = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (label, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("manifest line {}: missing ':'", lineno + 1)))?;
            let ids = rest
                .split_whitespace()
                .map(|t| {
                    t.parse::<u64>()
                        .map_err(|_| Error::invalid(format!("manifest line {}: bad id {t:?}", lineno + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            match label.trim() {
                "leftover" => leftover = Some(ids),
                other => {
                    let node = other
                        .parse::<u32>()
                        .map_err(|_| Error::invalid(format!("manifest line {}: bad node id {other:?}", lineno + 1)))?;
                    nodes.push((node, ids));
                }
            }
        }
        nodes.sort_by_key(|(n, _)| *n);
        for (expected, (node, _)) in nodes.iter().enumerate() {
            if *node != expected as u32 {
                return Err(Error::invalid(format!("manifest node ids must run 0..N, found {node}")));
            }
        }
        let mut iter = nodes.into_iter().map(|(_, ids)| ids);
        let server = iter
            .next()
            .ok_or_else(|| Error::invalid("manifest has no server line"))?;
        Ok(SplitAssignment {
            server,
            clients: iter.collect(),
            leftover: leftover.unwrap_or_default(),
        })
    }
}

/// Cuts `ids` into `parts` nearly equal blocks, larger blocks first.
fn even_blocks(ids: &[u64], parts: usize) -> Vec<Vec<u64>> {
    let base = ids.len() / parts;
    let extra = ids.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push(ids[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Pools both sources, shuffles, and hands out fixed-size blocks: clients
/// first, then the server. Whatever remains is left unassigned.
pub fn homogeneous_split(
    pool_a: &DatasetPool,
    pool_b: &DatasetPool,
    num_clients: usize,
    per_client: usize,
    server: usize,
    rng: &mut SeededRng,
) -> Result<SplitAssignment> {
    check_disjoint(pool_a, pool_b)?;
    if server == 0 {
        return Err(Error::invalid("server shard must be non-empty"));
    }
    let needed = num_clients * per_client + server;
    let available = pool_a.len() + pool_b.len();
    if needed > available {
        return Err(Error::invalid(format!(
            "homogeneous split needs {needed} samples but the pools hold {available}"
        )));
    }
    let mut ids: Vec<u64> = pool_a.ids.iter().chain(&pool_b.ids).copied().collect();
    rng.shuffle(&mut ids);
    let clients = (0..num_clients)
        .map(|i| ids[i * per_client..(i + 1) * per_client].to_vec())
        .collect();
    let client_end = num_clients * per_client;
    Ok(SplitAssignment {
        clients,
        server: ids[client_end..client_end + server].to_vec(),
        leftover: ids[client_end + server..].to_vec(),
    })
}

/// Domain-pure split: the server draws `server` ids from pool A, the rest of
/// pool A is divided among the first `a_clients` clients, and pool B among the
/// following `b_clients`. Uneven remainders go to the lowest-numbered node.
pub fn heterogeneous_split(
    pool_a: &DatasetPool,
    pool_b: &DatasetPool,
    a_clients: usize,
    b_clients: usize,
    server: usize,
    rng: &mut SeededRng,
) -> Result<SplitAssignment> {
    check_disjoint(pool_a, pool_b)?;
    if server == 0 {
        return Err(Error::invalid("server shard must be non-empty"));
    }
    if pool_a.len() < server + a_clients || (a_clients == 0 && pool_a.len() != server) {
        return Err(Error::invalid(format!(
            "pool A ({}) cannot cover a server of {server} and {a_clients} non-empty clients",
            pool_a.len()
        )));
    }
    if b_clients == 0 && !pool_b.is_empty() {
        return Err(Error::invalid("pool B has samples but no clients to hold them"));
    }
    if pool_b.len() < b_clients {
        return Err(Error::invalid(format!(
            "pool B ({}) cannot give {b_clients} clients one sample each",
            pool_b.len()
        )));
    }
    let mut a = pool_a.ids.clone();
    rng.shuffle(&mut a);
    let mut b = pool_b.ids.clone();
    rng.shuffle(&mut b);

    let server_ids = a[..server].to_vec();
    let mut clients = if a_clients > 0 {
        even_blocks(&a[server..], a_clients)
    } else {
        Vec::new()
    };
    if b_clients > 0 {
        clients.extend(even_blocks(&b, b_clients));
    }
    Ok(SplitAssignment {
        server: server_ids,
        clients,
        leftover: Vec::new(),
    })
}
