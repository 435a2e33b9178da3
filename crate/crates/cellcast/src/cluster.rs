//! Group-correlation matrix, agglomerative merging of peak-hour groups
//! into K clusters, and the final cell -> cluster assignment.
//!
//! Merging is average-linkage on distance d = 1 - r, starting from
//! singleton groups. Among equal-distance candidates the pair with the
//! lexicographically smallest (min group id, min group id) wins, so runs
//! are reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::HourlyCellSeries;
use crate::profile::{group_by_peak_hour, group_pearson, pearson, GroupProfile};

/// Symmetric unit-diagonal correlation matrix over the non-empty groups.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    group_ids: Vec<u8>,
    r: Vec<f64>, // n*n row-major
}

impl CorrelationMatrix {
    pub fn n(&self) -> usize {
        self.group_ids.len()
    }

    pub fn group_ids(&self) -> &[u8] {
        &self.group_ids
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.r[i * self.n() + j]
    }

    /// Builds a matrix from explicit entries; intended for tests and for
    /// merging callers that already have correlations.
    pub fn from_entries(group_ids: Vec<u8>, r: Vec<f64>) -> Result<Self> {
        let n = group_ids.len();
        if r.len() != n * n {
            return Err(Error::Shape(format!(
                "correlation matrix needs {}x{} entries, got {}",
                n,
                n,
                r.len()
            )));
        }
        let m = CorrelationMatrix { group_ids, r };
        for i in 0..n {
            if (m.get(i, i) - 1.0).abs() > 1e-12 {
                return Err(Error::Validation("correlation diagonal must be 1".into()));
            }
            for j in 0..n {
                let v = m.get(i, j);
                if !(-1.0..=1.0).contains(&v) || (v - m.get(j, i)).abs() > 1e-12 {
                    return Err(Error::Validation(
                        "correlation matrix must be symmetric with entries in [-1, 1]".into(),
                    ));
                }
            }
        }
        Ok(m)
    }
}

/// Pairwise Pearson correlation over all given group profiles.
pub fn correlation_matrix(
    profiles: &BTreeMap<u8, GroupProfile>,
    fold_daily: bool,
) -> Result<CorrelationMatrix> {
    let groups: Vec<&GroupProfile> = profiles.values().collect();
    let n = groups.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "correlation matrix needs at least 2 groups, got {n}"
        )));
    }
    let mut r = vec![0.0; n * n];
    for i in 0..n {
        r[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let v = group_pearson(groups[i], groups[j], fold_daily)?;
            r[i * n + j] = v;
            r[j * n + i] = v;
        }
    }
    Ok(CorrelationMatrix {
        group_ids: groups.iter().map(|g| g.group_id).collect(),
        r,
    })
}

/// Final clustering: every group mapped to a cluster in [0, k), plus the
/// cell-level map filled in by `assign_cells`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub k: usize,
    pub group_to_cluster: BTreeMap<u8, usize>,
    pub cell_to_cluster: BTreeMap<u32, usize>,
    /// Mean within-cluster pairwise correlation; 1.0 when no pairs exist.
    pub quality: f64,
    /// Groups with constant profiles that were attached outside Eq-style
    /// correlation (see `cluster_cells`).
    pub degenerate_groups: Vec<u8>,
}

/// Average-linkage agglomerative merge of the matrix's groups down to `k`
/// clusters. Cluster indices are assigned by ascending smallest member
/// group id.
pub fn merge_groups(matrix: &CorrelationMatrix, k: usize) -> Result<ClusterAssignment> {
    let n = matrix.n();
    if k < 1 || k > n {
        return Err(Error::Validation(format!(
            "k = {k} outside valid range [1, {n}]"
        )));
    }
    // Each cluster is a sorted list of matrix positions; index by smallest
    // group id for tie-breaking.
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();

    while clusters.len() > k {
        let mut best: Option<(f64, (u8, u8), usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let mut dist = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        dist += 1.0 - matrix.get(i, j);
                    }
                }
                dist /= (clusters[a].len() * clusters[b].len()) as f64;
                let rep_a = matrix.group_ids[clusters[a][0]];
                let rep_b = matrix.group_ids[clusters[b][0]];
                let key = if rep_a < rep_b {
                    (rep_a, rep_b)
                } else {
                    (rep_b, rep_a)
                };
                let better = match &best {
                    None => true,
                    Some((d, t, _, _)) => dist < *d || (dist == *d && key < *t),
                };
                if better {
                    best = Some((dist, key, a, b));
                }
            }
        }
        let (_, _, a, b) = best.expect("at least two clusters remain");
        let merged = clusters.remove(b);
        clusters[a].extend(merged);
        clusters[a].sort_unstable();
    }

    // Deterministic cluster indices: ascending smallest member group id.
    clusters.sort_by_key(|c| matrix.group_ids[c[0]]);

    let mut group_to_cluster = BTreeMap::new();
    let mut quality_sum = 0.0;
    let mut quality_pairs = 0usize;
    for (idx, cluster) in clusters.iter().enumerate() {
        for &pos in cluster {
            group_to_cluster.insert(matrix.group_ids[pos], idx);
        }
        for x in 0..cluster.len() {
            for y in (x + 1)..cluster.len() {
                quality_sum += matrix.get(cluster[x], cluster[y]);
                quality_pairs += 1;
            }
        }
    }
    let quality = if quality_pairs == 0 {
        1.0
    } else {
        quality_sum / quality_pairs as f64
    };

    Ok(ClusterAssignment {
        k,
        group_to_cluster,
        cell_to_cluster: BTreeMap::new(),
        quality,
        degenerate_groups: Vec::new(),
    })
}

/// Propagates each group's cluster to its member cells; fills and returns
/// the cell-level map.
pub fn assign_cells(
    groups: &BTreeMap<u8, GroupProfile>,
    assignment: &mut ClusterAssignment,
) -> Result<BTreeMap<u32, usize>> {
    let mut cells = BTreeMap::new();
    for group in groups.values() {
        let cluster = assignment
            .group_to_cluster
            .get(&group.group_id)
            .copied()
            .ok_or_else(|| {
                Error::Data(format!("group {} has no cluster mapping", group.group_id))
            })?;
        for &cell in &group.members {
            cells.insert(cell, cluster);
        }
    }
    assignment.cell_to_cluster = cells.clone();
    Ok(cells)
}

#[derive(Debug, Clone, Copy)]
pub struct ClusterOptions {
    pub k: usize,
    pub fold_daily: bool,
}

/// Full clustering pipeline output.
#[derive(Debug)]
pub struct ClusterOutput {
    pub groups: BTreeMap<u8, GroupProfile>,
    pub matrix: CorrelationMatrix,
    pub assignment: ClusterAssignment,
}

/// Groups cells by representative peak hour, correlates the group
/// profiles, merges to K clusters and assigns cells.
///
/// Groups whose profile is constant cannot enter the correlation matrix;
/// they are attached afterwards to the cluster whose aggregate profile
/// correlates best with their raw member series (falling back to cluster
/// 0 when no correlation is defined) and flagged in the assignment.
pub fn cluster_cells(
    cells: &BTreeMap<u32, HourlyCellSeries>,
    opts: ClusterOptions,
) -> Result<ClusterOutput> {
    let groups = group_by_peak_hour(cells)?;
    let (constant, varying): (Vec<&GroupProfile>, Vec<&GroupProfile>) =
        groups.values().partition(|g| g.is_constant());

    let varying_map: BTreeMap<u8, GroupProfile> = varying
        .iter()
        .map(|g| (g.group_id, (*g).clone()))
        .collect();
    if opts.k > varying_map.len() {
        return Err(Error::Validation(format!(
            "k = {} exceeds the {} correlatable groups",
            opts.k,
            varying_map.len()
        )));
    }
    // A single varying group leaves nothing to correlate or merge.
    let matrix = if varying_map.len() == 1 {
        let only = varying_map.keys().next().copied().unwrap();
        CorrelationMatrix::from_entries(vec![only], vec![1.0])?
    } else {
        correlation_matrix(&varying_map, opts.fold_daily)?
    };
    let mut assignment = merge_groups(&matrix, opts.k)?;

    for group in constant {
        let cluster = nearest_cluster_by_member_correlation(group, &varying_map, &assignment, cells);
        assignment.group_to_cluster.insert(group.group_id, cluster);
        assignment.degenerate_groups.push(group.group_id);
        log::warn!(
            "group {} has a constant profile; attached to cluster {cluster} by member correlation",
            group.group_id
        );
    }

    assign_cells(&groups, &mut assignment)?;
    Ok(ClusterOutput {
        groups,
        matrix,
        assignment,
    })
}

/// Best cluster for a constant-profile group: highest mean correlation of
/// the group's raw member series against each cluster's pooled profile.
fn nearest_cluster_by_member_correlation(
    group: &GroupProfile,
    varying: &BTreeMap<u8, GroupProfile>,
    assignment: &ClusterAssignment,
    cells: &BTreeMap<u32, HourlyCellSeries>,
) -> usize {
    let mut cluster_profiles: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (gid, cluster) in &assignment.group_to_cluster {
        let Some(profile) = varying.get(gid) else {
            continue;
        };
        let entry = cluster_profiles
            .entry(*cluster)
            .or_insert_with(|| (vec![0.0; profile.profile.len()], 0));
        for (acc, v) in entry.0.iter_mut().zip(&profile.profile) {
            *acc += v;
        }
        entry.1 += 1;
    }

    let mut best = (0usize, f64::NEG_INFINITY);
    for (cluster, (sum, count)) in &cluster_profiles {
        let mean: Vec<f64> = sum.iter().map(|v| v / *count as f64).collect();
        let mut corr_sum = 0.0;
        let mut corr_n = 0usize;
        for member in &group.members {
            if let Some(series) = cells.get(member) {
                if let Ok(r) = pearson(&series.values, &mean) {
                    corr_sum += r;
                    corr_n += 1;
                }
            }
        }
        if corr_n > 0 {
            let score = corr_sum / corr_n as f64;
            if score > best.1 {
                best = (*cluster, score);
            }
        }
    }
    best.0
}

/// Fraction of cells on which two partitions agree under the best
/// bijective relabeling of the second onto the first (exhaustive over
/// permutations of the smaller label set; both sides must be small).
pub fn partition_agreement(
    reference: &BTreeMap<u32, usize>,
    candidate: &BTreeMap<u32, usize>,
) -> Result<f64> {
    if reference.len() != candidate.len() || reference.is_empty() {
        return Err(Error::Validation(
            "partition agreement needs two non-empty maps over the same cells".into(),
        ));
    }
    let ref_labels: BTreeSet<usize> = reference.values().copied().collect();
    let cand_labels: BTreeSet<usize> = candidate.values().copied().collect();
    if cand_labels.len() > 8 {
        return Err(Error::Validation(
            "partition agreement supports at most 8 candidate labels".into(),
        ));
    }
    let ref_labels: Vec<usize> = ref_labels.into_iter().collect();
    let cand_labels: Vec<usize> = cand_labels.into_iter().collect();

    // Contingency counts cand-label x ref-label.
    let mut counts = vec![vec![0usize; ref_labels.len()]; cand_labels.len()];
    for (cell, r) in reference {
        let c = candidate
            .get(cell)
            .ok_or_else(|| Error::Validation(format!("cell {cell} missing from candidate")))?;
        let ci = cand_labels.iter().position(|l| l == c).unwrap();
        let ri = ref_labels.iter().position(|l| l == r).unwrap();
        counts[ci][ri] += 1;
    }

    let mut perm: Vec<usize> = (0..cand_labels.len()).collect();
    let mut best = 0usize;
    permute(&mut perm, 0, &mut |p| {
        let mut agree = 0;
        for (ci, row) in counts.iter().enumerate() {
            let target = p[ci];
            if target < ref_labels.len() {
                agree += row[target];
            }
        }
        best = best.max(agree);
    });
    Ok(best as f64 / reference.len() as f64)
}

fn permute(items: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == items.len() {
        visit(items);
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permute(items, start + 1, visit);
        items.swap(start, i);
    }
}

// --- exports --------------------------------------------------------------

/// CSV `group_i,group_j,r` over all ordered pairs, heatmap-ready.
pub fn write_matrix_csv(path: &Path, matrix: &CorrelationMatrix) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "group_i,group_j,r").map_err(Error::io(path))?;
    for i in 0..matrix.n() {
        for j in 0..matrix.n() {
            writeln!(
                w,
                "{},{},{}",
                matrix.group_ids[i],
                matrix.group_ids[j],
                matrix.get(i, j)
            )
            .map_err(Error::io(path))?;
        }
    }
    w.flush().map_err(Error::io(path))
}

/// CSV `cell_id,group_id,cluster`.
pub fn write_assignment_csv(
    path: &Path,
    groups: &BTreeMap<u8, GroupProfile>,
    assignment: &ClusterAssignment,
) -> Result<()> {
    let mut cell_group: BTreeMap<u32, u8> = BTreeMap::new();
    for g in groups.values() {
        for &cell in &g.members {
            cell_group.insert(cell, g.group_id);
        }
    }
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "cell_id,group_id,cluster").map_err(Error::io(path))?;
    for (cell, cluster) in &assignment.cell_to_cluster {
        let group = cell_group
            .get(cell)
            .ok_or_else(|| Error::Data(format!("cell {cell} missing from groups")))?;
        writeln!(w, "{cell},{group},{cluster}").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

/// Reads back an assignment CSV into (cell -> cluster, k).
pub fn read_assignment_csv(path: &Path) -> Result<(BTreeMap<u32, usize>, usize)> {
    let file = File::open(path).map_err(Error::io(path))?;
    let reader = BufReader::new(file);
    let mut cells = BTreeMap::new();
    let mut max_cluster = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if idx == 0 {
            if line.trim() != "cell_id,group_id,cluster" {
                return Err(Error::Data(format!(
                    "{}: unexpected header {line:?}",
                    path.display()
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: idx + 1,
                msg: "expected cell_id,group_id,cluster".into(),
            });
        }
        let cell: u32 = parts[0].parse().map_err(|_| Error::Parse {
            line: idx + 1,
            msg: format!("malformed cell id {:?}", parts[0]),
        })?;
        let cluster: usize = parts[2].parse().map_err(|_| Error::Parse {
            line: idx + 1,
            msg: format!("malformed cluster {:?}", parts[2]),
        })?;
        max_cluster = max_cluster.max(cluster);
        cells.insert(cell, cluster);
    }
    if cells.is_empty() {
        return Err(Error::Data(format!(
            "{}: assignment has no cells",
            path.display()
        )));
    }
    Ok((cells, max_cluster + 1))
}
