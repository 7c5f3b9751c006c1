use std::collections::HashMap;

use super::layer::LayerKind;
use super::mask::PruningMask;
use super::network::{NetError, NetworkSpec};

/// A producing channel: `(layer index, channel index)`.
type Atom = (usize, usize);

/// Decision-unit index over a network's prunable channels.
///
/// Channels of `Conv2d`/`Linear` layers are the atoms. An `Add` layer forces
/// the channels it sums to share one pruning decision, so atoms are merged
/// with union-find across every `Add`. A merged component becomes a decision
/// unit only if all of its atoms belong to prunable layers; components that
/// touch the input or a non-prunable producer are permanently kept.
#[derive(Debug, Clone)]
pub struct ChannelIndexing {
    units: Vec<Vec<Atom>>,
    unit_of: HashMap<Atom, usize>,
    /// Per layer, per output channel: producing atoms feeding that slot.
    sources: Vec<Vec<Vec<Atom>>>,
}

impl ChannelIndexing {
    /// Total number of decision units `C`.
    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    /// Member atoms of a unit, sorted by `(layer, channel)`.
    pub fn unit(&self, u: usize) -> &[Atom] {
        &self.units[u]
    }

    pub fn units(&self) -> &[Vec<Atom>] {
        &self.units
    }

    /// Unit owning a producing `(layer, channel)`, if that channel is prunable.
    pub fn unit_of(&self, layer: usize, channel: usize) -> Option<usize> {
        self.unit_of.get(&(layer, channel)).copied()
    }

    /// Producing atoms feeding output channel `c` of layer `i`.
    pub fn channel_sources(&self, layer: usize, channel: usize) -> &[Atom] {
        &self.sources[layer][channel]
    }

    /// Keep flag per output channel of `layer` under `mask`.
    ///
    /// A channel survives if any of its producing atoms is kept; atoms
    /// without a unit (input channels, non-prunable producers) always are.
    pub fn keep_vec(&self, mask: &PruningMask, layer: usize) -> Vec<bool> {
        self.sources[layer]
            .iter()
            .map(|atoms| {
                atoms.iter().any(|a| match self.unit_of.get(a) {
                    Some(&u) => !mask.is_pruned(u),
                    None => true,
                })
            })
            .collect()
    }

    pub fn kept_count(&self, mask: &PruningMask, layer: usize) -> usize {
        self.keep_vec(mask, layer).iter().filter(|&&k| k).count()
    }

    pub fn validate_mask(&self, mask: &PruningMask) -> Result<(), NetError> {
        if mask.len() != self.num_units() {
            return Err(NetError::MaskLength {
                expected: self.num_units(),
                got: mask.len(),
            });
        }
        Ok(())
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut c = x;
        while self.parent[c] != r {
            let next = self.parent[c];
            self.parent[c] = r;
            c = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Deterministic orientation: smaller root wins.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Builds the decision-unit index for a validated network.
pub fn build_indexing(net: &NetworkSpec) -> Result<ChannelIndexing, NetError> {
    let n = net.len();

    // Flat ids for producing atoms.
    let mut atom_base = vec![usize::MAX; n];
    let mut total_atoms = 0usize;
    for (i, l) in net.layers().iter().enumerate() {
        if l.kind.produces_channels() {
            atom_base[i] = total_atoms;
            total_atoms += l.out_channels;
        }
    }

    // Channel provenance, layer by layer in topological order.
    let mut sources: Vec<Vec<Vec<Atom>>> = Vec::with_capacity(n);
    for (i, l) in net.layers().iter().enumerate() {
        let srcs: Vec<Vec<Atom>> = match l.kind {
            LayerKind::Input | LayerKind::Conv2d | LayerKind::Linear => {
                (0..l.out_channels).map(|c| vec![(i, c)]).collect()
            }
            LayerKind::BatchNorm | LayerKind::Pool => sources[net.provider(i)].clone(),
            LayerKind::Add => {
                let a = &sources[net.providers(i)[0]];
                let b = &sources[net.providers(i)[1]];
                a.iter()
                    .zip(b)
                    .map(|(x, y)| {
                        let mut m = x.clone();
                        for atom in y {
                            if !m.contains(atom) {
                                m.push(*atom);
                            }
                        }
                        m.sort_unstable();
                        m
                    })
                    .collect()
            }
            LayerKind::Flatten => {
                let p = net.provider(i);
                let (h, w) = net.out(p).hw.expect("flatten provider is spatial");
                let hw = h * w;
                let mut out = Vec::with_capacity(net.out(p).channels * hw);
                for c in 0..net.out(p).channels {
                    for _ in 0..hw {
                        out.push(sources[p][c].clone());
                    }
                }
                out
            }
            LayerKind::Output => sources[net.provider(i)].clone(),
        };
        sources.push(srcs);
    }

    // Merge coupled atoms across every Add.
    let mut uf = UnionFind::new(total_atoms);
    let flat = |atom: &Atom| atom_base[atom.0] + atom.1;
    for (i, l) in net.layers().iter().enumerate() {
        if l.kind != LayerKind::Add {
            continue;
        }
        for atoms in &sources[i] {
            for pair in atoms.windows(2) {
                uf.union(flat(&pair[0]), flat(&pair[1]));
            }
        }
    }

    // Group atoms by root; a component is prunable only if all members are.
    let mut components: HashMap<usize, (Vec<Atom>, bool)> = HashMap::new();
    for (i, l) in net.layers().iter().enumerate() {
        if !l.kind.produces_channels() {
            continue;
        }
        let prunable = l.prunable && l.kind != LayerKind::Input;
        for c in 0..l.out_channels {
            let root = uf.find(atom_base[i] + c);
            let entry = components.entry(root).or_insert_with(|| (Vec::new(), true));
            entry.0.push((i, c));
            entry.1 &= prunable;
        }
    }

    let mut units: Vec<Vec<Atom>> = components
        .into_values()
        .filter(|(_, prunable)| *prunable)
        .map(|(mut atoms, _)| {
            atoms.sort_unstable();
            atoms
        })
        .collect();
    units.sort_unstable_by_key(|atoms| atoms[0]);

    let mut unit_of = HashMap::new();
    for (u, atoms) in units.iter().enumerate() {
        for &a in atoms {
            unit_of.insert(a, u);
        }
    }

    Ok(ChannelIndexing { units, unit_of, sources })
}
