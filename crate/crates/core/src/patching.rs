//! Block matching and the spatial patch-tensor operator.
//!
//! A patch is a `b x b` square (2D grids) or `b x b x b` cube (3D grids)
//! identified by its lowest corner. Patch voxels are vectorized with x
//! fastest, then y, then z. Groups of similar patches become tensors of
//! dims `(N_b, N_p, N_TSL)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::encoding::{Grid, ImageSeries};
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    /// Patch side length `b`.
    pub size: usize,
    /// Spacing of reference patches.
    pub stride: usize,
    /// Half-width of the candidate search window around each reference.
    pub search_radius: usize,
    /// Largest accepted normalized distance `lambda_m`.
    pub distance_threshold: f64,
    /// Maximum group size `N_p,max`, reference included.
    pub max_group: usize,
}

impl PatchConfig {
    pub fn default_2d() -> Self {
        Self {
            size: 9,
            stride: 3,
            search_radius: 16,
            distance_threshold: 0.2,
            max_group: 30,
        }
    }

    pub fn default_3d() -> Self {
        Self {
            size: 5,
            stride: 3,
            search_radius: 8,
            ..Self::default_2d()
        }
    }

    pub fn default_for(grid: &Grid) -> Self {
        if grid.is_3d() {
            Self::default_3d()
        } else {
            Self::default_2d()
        }
    }

    /// Patch extent along each axis on `grid`.
    pub fn patch_dims(&self, grid: &Grid) -> [usize; 3] {
        [self.size, self.size, if grid.is_3d() { self.size } else { 1 }]
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        let [bx, by, bz] = self.patch_dims(grid);
        if self.size == 0 || bx > grid.nx || by > grid.ny || bz > grid.nz {
            return Err(Error::invalid(format!("patch size {} does not fit grid {grid}", self.size)));
        }
        if self.stride == 0 || self.max_group == 0 {
            return Err(Error::invalid("patch stride and maximum group size must be at least 1"));
        }
        if !(self.distance_threshold >= 0.0) {
            return Err(Error::invalid(format!(
                "distance threshold must be nonnegative, got {}",
                self.distance_threshold
            )));
        }
        Ok(())
    }
}

/// One group of similar patches: the reference corner first, then matches
/// by increasing distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGroup {
    /// Linear grid index of each member's lowest corner.
    pub members: Vec<usize>,
    pub distances: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGroupIndex {
    pub grid: Grid,
    pub patch_dims: [usize; 3],
    pub groups: Vec<PatchGroup>,
}

impl PatchGroupIndex {
    pub fn patch_len(&self) -> usize {
        self.patch_dims.iter().product()
    }

    /// Grid offsets of the patch voxels relative to its corner.
    pub fn offsets(&self) -> Vec<usize> {
        patch_offsets(&self.grid, self.patch_dims)
    }

    /// Checks that every member patch lies inside the grid.
    pub fn validate(&self) -> Result<()> {
        let g = self.grid;
        let [bx, by, bz] = self.patch_dims;
        for (gi, group) in self.groups.iter().enumerate() {
            if group.members.is_empty() || group.members.len() != group.distances.len() {
                return Err(Error::Conformance(format!("group {gi} is malformed")));
            }
            for &m in &group.members {
                if m >= g.n_voxels() {
                    return Err(Error::Conformance(format!("group {gi} member {m} is outside {g}")));
                }
                let (x, y, z) = g.coords(m);
                if x + bx > g.nx || y + by > g.ny || z + bz > g.nz {
                    return Err(Error::Conformance(format!(
                        "group {gi} patch at ({x},{y},{z}) crosses the edge of {g}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn patch_offsets(grid: &Grid, dims: [usize; 3]) -> Vec<usize> {
    let mut out = Vec::with_capacity(dims.iter().product());
    for dz in 0..dims[2] {
        for dy in 0..dims[1] {
            for dx in 0..dims[0] {
                out.push(grid.index(dx, dy, dz));
            }
        }
    }
    out
}

/// Corners `0, s, 2s, ...` up to `n - b`, with `n - b` always included.
fn lattice(n: usize, b: usize, stride: usize) -> Vec<usize> {
    let last = n - b;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if *v.last().unwrap() != last {
        v.push(last);
    }
    v
}

/// Groups similar patches of a real-valued similarity image.
///
/// For each reference corner on the stride lattice, every corner within the
/// search window is scored by `|B_ref - B|^2 / |B|^2`; candidates at or
/// below the threshold are kept, sorted by distance then by corner index,
/// and truncated to the maximum group size. All-zero candidates are skipped
/// unless the reference is all-zero too, in which case they score 0.
pub fn block_match(image: &[f64], grid: Grid, cfg: &PatchConfig) -> Result<PatchGroupIndex> {
    cfg.validate(&grid)?;
    if image.len() != grid.n_voxels() {
        return Err(Error::shape(format!(
            "similarity image has {} voxels, grid {grid} has {}",
            image.len(),
            grid.n_voxels()
        )));
    }
    let dims = cfg.patch_dims(&grid);
    let offsets = patch_offsets(&grid, dims);
    let energy = patch_energies(image, &grid, dims);

    let xs = lattice(grid.nx, dims[0], cfg.stride);
    let ys = lattice(grid.ny, dims[1], cfg.stride);
    let zs = lattice(grid.nz, dims[2], cfg.stride);
    let r = cfg.search_radius;

    let mut groups = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    let mut reference = vec![0.0; offsets.len()];
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for &rz in &zs {
        for &ry in &ys {
            for &rx in &xs {
                let ref_corner = grid.index(rx, ry, rz);
                for (p, &o) in reference.iter_mut().zip(&offsets) {
                    *p = image[ref_corner + o];
                }
                let ref_zero = energy[ref_corner] == 0.0;
                scored.clear();
                let window = |c: usize, n: usize, b: usize| (c.saturating_sub(r), (c + r).min(n - b));
                let (x0, x1) = window(rx, grid.nx, dims[0]);
                let (y0, y1) = window(ry, grid.ny, dims[1]);
                let (z0, z1) = window(rz, grid.nz, dims[2]);
                for cz in z0..=z1 {
                    for cy in y0..=y1 {
                        for cx in x0..=x1 {
                            let cand = grid.index(cx, cy, cz);
                            if cand == ref_corner {
                                continue;
                            }
                            let e = energy[cand];
                            if e == 0.0 {
                                if ref_zero {
                                    scored.push((0.0, cand));
                                }
                                continue;
                            }
                            let limit = cfg.distance_threshold * e;
                            let mut acc = 0.0;
                            let mut within = true;
                            for (p, &o) in reference.iter().zip(&offsets) {
                                let d = p - image[cand + o];
                                acc += d * d;
                                if acc > limit {
                                    within = false;
                                    break;
                                }
                            }
                            if within {
                                scored.push((acc / e, cand));
                            }
                        }
                    }
                }
                scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                scored.truncate(cfg.max_group - 1);
                let mut members = Vec::with_capacity(scored.len() + 1);
                let mut distances = Vec::with_capacity(scored.len() + 1);
                members.push(ref_corner);
                distances.push(0.0);
                for &(d, c) in scored.iter() {
                    members.push(c);
                    distances.push(d);
                }
                groups.push(PatchGroup { members, distances });
            }
        }
    }
    Ok(PatchGroupIndex { grid, patch_dims: dims, groups })
}

/// Sum of squares of every patch, indexed by corner (zero where no patch fits).
fn patch_energies(image: &[f64], grid: &Grid, dims: [usize; 3]) -> Vec<f64> {
    // Separable box sums of squared values along each axis.
    let sq: Vec<f64> = image.iter().map(|v| v * v).collect();
    let box_axis = |src: &[f64], axis: usize, b: usize| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        let n = grid.dims()[axis];
        let step = [1, grid.nx, grid.nx * grid.ny][axis];
        for v in 0..src.len() {
            let c = [v % grid.nx, (v / grid.nx) % grid.ny, v / (grid.nx * grid.ny)][axis];
            if c + b <= n {
                out[v] = (0..b).map(|d| src[v + d * step]).sum();
            }
        }
        out
    };
    let e = box_axis(&sq, 0, dims[0]);
    let e = box_axis(&e, 1, dims[1]);
    box_axis(&e, 2, dims[2])
}

/// `P_i(X)` for every group: tensors of dims `(N_b, N_p^i, N_TSL)`.
pub fn extract_tensors(x: &ImageSeries, idx: &PatchGroupIndex) -> Result<Vec<Tensor3>> {
    x.grid().check_same(&idx.grid)?;
    idx.validate()?;
    let offsets = idx.offsets();
    Ok(idx.groups.iter().map(|g| extract_group(x, g, &offsets)).collect())
}

pub(crate) fn extract_group(x: &ImageSeries, group: &PatchGroup, offsets: &[usize]) -> Tensor3 {
    let nb = offsets.len();
    let np = group.members.len();
    let nt = x.n_tsl();
    let mut data = Vec::with_capacity(nb * np * nt);
    for e in 0..nt {
        let echo = x.echo(e);
        for &m in &group.members {
            data.extend(offsets.iter().map(|&o| echo[m + o]));
        }
    }
    Tensor3::new([nb, np, nt], data).expect("group tensor dims are consistent")
}

/// Adds one group tensor into an echo-major accumulator (`P_i^T`).
pub(crate) fn scatter_group(acc: &mut [Complex64], n_voxels: usize, t: &Tensor3, group: &PatchGroup, offsets: &[usize]) {
    let [nb, np, nt] = t.dims();
    let data = t.data();
    for e in 0..nt {
        let echo = &mut acc[e * n_voxels..(e + 1) * n_voxels];
        for (mi, &m) in group.members.iter().enumerate() {
            let col = &data[(e * np + mi) * nb..(e * np + mi + 1) * nb];
            for (v, &o) in col.iter().zip(offsets) {
                echo[m + o] += v;
            }
        }
    }
}

fn check_conformance(tensors: &[Tensor3], idx: &PatchGroupIndex, n_tsl: usize) -> Result<()> {
    if tensors.len() != idx.groups.len() {
        return Err(Error::Conformance(format!(
            "{} tensors for {} patch groups",
            tensors.len(),
            idx.groups.len()
        )));
    }
    let nb = idx.patch_len();
    for (i, (t, g)) in tensors.iter().zip(&idx.groups).enumerate() {
        if t.dims() != [nb, g.members.len(), n_tsl] {
            return Err(Error::Conformance(format!(
                "tensor {i} has dims {:?}, group expects {:?}",
                t.dims(),
                [nb, g.members.len(), n_tsl]
            )));
        }
    }
    Ok(())
}

/// `P^T`: places every patch back and sums overlapping contributions.
pub fn scatter_sum(tensors: &[Tensor3], idx: &PatchGroupIndex, tsl_ms: &[f64]) -> Result<ImageSeries> {
    idx.validate()?;
    check_conformance(tensors, idx, tsl_ms.len())?;
    let n = idx.grid.n_voxels();
    let offsets = idx.offsets();
    let mut acc = vec![Complex64::default(); n * tsl_ms.len()];
    for (t, g) in tensors.iter().zip(&idx.groups) {
        scatter_group(&mut acc, n, t, g, &offsets);
    }
    ImageSeries::new(idx.grid, tsl_ms.to_vec(), acc)
}

/// Number of patch entries covering each voxel (the diagonal of `P^T P`).
pub fn coverage_counts(idx: &PatchGroupIndex) -> Vec<u32> {
    let mut counts = vec![0u32; idx.grid.n_voxels()];
    let offsets = idx.offsets();
    for g in &idx.groups {
        for &m in &g.members {
            for &o in &offsets {
                counts[m + o] += 1;
            }
        }
    }
    counts
}

/// Averages overlapping patches back into an image; uncovered voxels are 0.
pub fn aggregate(tensors: &[Tensor3], idx: &PatchGroupIndex, tsl_ms: &[f64]) -> Result<ImageSeries> {
    let mut sum = scatter_sum(tensors, idx, tsl_ms)?;
    let counts = coverage_counts(idx);
    divide_by_counts(&mut sum, &counts);
    Ok(sum)
}

pub(crate) fn divide_by_counts(x: &mut ImageSeries, counts: &[u32]) {
    let n = x.n_voxels();
    for e in 0..x.n_tsl() {
        for (v, &c) in x.echo_mut(e).iter_mut().zip(counts.iter().take(n)) {
            if c == 0 {
                *v = Complex64::default();
            } else {
                *v /= c as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_series(grid: Grid, n_tsl: usize, seed: u64) -> ImageSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.n_voxels() * n_tsl;
        let data = (0..n).map(|_| Complex64::new(rng.random(), rng.random())).collect();
        ImageSeries::new(grid, (1..=n_tsl).map(|e| e as f64).collect(), data).unwrap()
    }

    fn small_cfg() -> PatchConfig {
        PatchConfig {
            size: 3,
            stride: 2,
            search_radius: 4,
            distance_threshold: 0.3,
            max_group: 6,
        }
    }

    #[test]
    fn constant_image_groups_follow_tie_break() {
        let grid = Grid::new_2d(10, 10).unwrap();
        let img = vec![2.0; 100];
        let idx = block_match(&img, grid, &small_cfg()).unwrap();
        let first = &idx.groups[0];
        // reference (0,0), then candidates by linear index
        assert_eq!(first.members, vec![0, 1, 2, 3, 4, 10]);
        assert!(first.distances.iter().all(|&d| d == 0.0));
        for g in &idx.groups {
            assert_eq!(g.members.len(), 6);
        }
    }

    #[test]
    fn two_class_blocks_stay_separate() {
        // 4x4 blocks alternating between 1 and 3.
        let grid = Grid::new_2d(16, 16).unwrap();
        let img: Vec<f64> = (0..256)
            .map(|v| {
                let (x, y) = (v % 16, v / 16);
                if (x / 4 + y / 4) % 2 == 0 {
                    1.0
                } else {
                    3.0
                }
            })
            .collect();
        let cfg = PatchConfig {
            size: 4,
            stride: 4,
            search_radius: 8,
            distance_threshold: 0.1,
            max_group: 50,
        };
        // Between-class distances from the brute-force definition.
        let d13: f64 = 16.0 * 4.0 / (16.0 * 9.0);
        let d31 = 16.0 * 4.0 / 16.0;
        assert!(cfg.distance_threshold < d13.min(d31));
        let idx = block_match(&img, grid, &cfg).unwrap();
        let patch = |corner: usize| -> Vec<f64> {
            idx.offsets().iter().map(|o| img[corner + o]).collect()
        };
        for g in &idx.groups {
            let reference = patch(g.members[0]);
            for (m, d) in g.members.iter().zip(&g.distances) {
                let cand = patch(*m);
                let num: f64 = reference.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum();
                let den: f64 = cand.iter().map(|b| b * b).sum();
                assert!((num / den - d).abs() < 1e-12);
                assert!(*d <= cfg.distance_threshold);
            }
            let uniform_ref = reference.iter().all(|&v| v == reference[0]);
            if uniform_ref {
                for m in &g.members {
                    assert!(patch(*m).iter().all(|&v| v == reference[0]));
                }
            }
        }
    }

    #[test]
    fn groups_are_sorted_and_deterministic() {
        let grid = Grid::new_2d(20, 18).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img: Vec<f64> = (0..grid.n_voxels()).map(|_| 1.0 + rng.random::<f64>()).collect();
        let a = block_match(&img, grid, &small_cfg()).unwrap();
        assert_eq!(a, block_match(&img, grid, &small_cfg()).unwrap());
        for g in &a.groups {
            assert_eq!(g.distances[0], 0.0);
            assert!(g.distances.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn zero_candidates_are_skipped() {
        let grid = Grid::new_2d(12, 6).unwrap();
        let img: Vec<f64> = (0..72).map(|v| if v % 12 < 6 { 0.0 } else { 1.0 }).collect();
        let cfg = PatchConfig { size: 3, stride: 3, search_radius: 12, distance_threshold: 10.0, max_group: 100 };
        let idx = block_match(&img, grid, &cfg).unwrap();
        let energy = patch_energies(&img, &grid, cfg.patch_dims(&grid));
        for g in &idx.groups {
            let ref_zero = energy[g.members[0]] == 0.0;
            for &m in &g.members[1..] {
                if !ref_zero {
                    assert!(energy[m] > 0.0);
                }
            }
        }
    }

    #[test]
    fn single_member_tensor_is_the_patch() {
        let grid = Grid::new_2d(6, 5).unwrap();
        let x = random_series(grid, 3, 1);
        let idx = PatchGroupIndex {
            grid,
            patch_dims: [2, 2, 1],
            groups: vec![PatchGroup { members: vec![grid.index(1, 2, 0)], distances: vec![0.0] }],
        };
        let t = &extract_tensors(&x, &idx).unwrap()[0];
        assert_eq!(t.dims(), [4, 1, 3]);
        for e in 0..3 {
            assert_eq!(t.get(0, 0, e), x.at(grid.index(1, 2, 0), e));
            assert_eq!(t.get(1, 0, e), x.at(grid.index(2, 2, 0), e));
            assert_eq!(t.get(2, 0, e), x.at(grid.index(1, 3, 0), e));
            assert_eq!(t.get(3, 0, e), x.at(grid.index(2, 3, 0), e));
        }
        // Only the footprint receives anything on the way back.
        let back = aggregate(&extract_tensors(&x, &idx).unwrap(), &idx, x.tsl_ms()).unwrap();
        let covered = coverage_counts(&idx);
        for v in 0..grid.n_voxels() {
            if covered[v] == 0 {
                assert_eq!(back.at(v, 0), Complex64::default());
            } else {
                assert_eq!(back.at(v, 0), x.at(v, 0));
            }
        }
    }

    #[test]
    fn identical_members_give_identical_slices() {
        let grid = Grid::new_2d(8, 8).unwrap();
        let x = random_series(grid, 2, 9);
        let idx = PatchGroupIndex {
            grid,
            patch_dims: [3, 3, 1],
            groups: vec![PatchGroup { members: vec![10, 10], distances: vec![0.0, 0.0] }],
        };
        let t = &extract_tensors(&x, &idx).unwrap()[0];
        for e in 0..2 {
            for v in 0..9 {
                assert_eq!(t.get(v, 0, e), t.get(v, 1, e));
            }
        }
        assert!(coverage_counts(&idx).iter().all(|&c| c == 0 || c == 2));
    }

    #[test]
    fn extract_then_aggregate_reproduces_covered_voxels() {
        let grid = Grid::new(9, 8, 7).unwrap();
        let x = random_series(grid, 3, 4);
        let cfg = PatchConfig { size: 3, stride: 2, search_radius: 2, distance_threshold: 1.0, max_group: 4 };
        let idx = block_match(&x.magnitude_echo(0), grid, &cfg).unwrap();
        let counts = coverage_counts(&idx);
        assert!(counts.iter().all(|&c| c > 0), "stride <= size must cover every voxel");
        let back = aggregate(&extract_tensors(&x, &idx).unwrap(), &idx, x.tsl_ms()).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn aggregate_matches_scatter_count_oracle() {
        let grid = Grid::new_2d(7, 7).unwrap();
        let idx = PatchGroupIndex {
            grid,
            patch_dims: [3, 3, 1],
            groups: vec![
                PatchGroup { members: vec![0, 8], distances: vec![0.0, 0.1] },
                PatchGroup { members: vec![16], distances: vec![0.0] },
            ],
        };
        let tensors = vec![
            Tensor3::from_fn([9, 2, 2], |v, m, e| Complex64::new((v + 10 * m) as f64, e as f64)),
            Tensor3::from_fn([9, 1, 2], |v, _, e| Complex64::new(-(v as f64), 2.0 * e as f64)),
        ];
        let avg = aggregate(&tensors, &idx, &[1.0, 2.0]).unwrap();
        // Oracle: walk every (group, member, voxel) and tally per target voxel.
        let mut sum = vec![Complex64::default(); 2 * 49];
        let mut cnt = vec![0.0; 49];
        for (t, g) in tensors.iter().zip(&idx.groups) {
            for (mi, &corner) in g.members.iter().enumerate() {
                let (cx, cy, _) = grid.coords(corner);
                for dy in 0..3 {
                    for dx in 0..3 {
                        let target = grid.index(cx + dx, cy + dy, 0);
                        cnt[target] += 1.0;
                        for e in 0..2 {
                            sum[e * 49 + target] += t.get(dx + 3 * dy, mi, e);
                        }
                    }
                }
            }
        }
        for v in 0..49 {
            assert_eq!(coverage_counts(&idx)[v] as f64, cnt[v]);
            for e in 0..2 {
                let expected = if cnt[v] > 0.0 { sum[e * 49 + v] / cnt[v] } else { Complex64::default() };
                assert!((avg.at(v, e) - expected).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn non_overlapping_tiling_counts_once() {
        let grid = Grid::new_2d(6, 6).unwrap();
        let cfg = PatchConfig { size: 3, stride: 3, search_radius: 0, distance_threshold: 0.0, max_group: 1 };
        let idx = block_match(&vec![1.0; 36], grid, &cfg).unwrap();
        assert_eq!(idx.groups.len(), 4);
        assert!(coverage_counts(&idx).iter().all(|&c| c == 1));
    }

    #[test]
    fn scatter_sum_is_adjoint_of_extract() {
        let grid = Grid::new_2d(11, 9).unwrap();
        let x = random_series(grid, 3, 5);
        let cfg = PatchConfig { size: 4, stride: 3, search_radius: 3, distance_threshold: 0.5, max_group: 5 };
        let idx = block_match(&x.magnitude_echo(0), grid, &cfg).unwrap();
        let px = extract_tensors(&x, &idx).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ys: Vec<Tensor3> = px
            .iter()
            .map(|t| Tensor3::from_fn(t.dims(), |_, _, _| Complex64::new(rng.random(), rng.random())))
            .collect();
        let pty = scatter_sum(&ys, &idx, x.tsl_ms()).unwrap();
        let lhs: Complex64 = px.iter().zip(&ys).map(|(a, b)| a.inner(b)).sum();
        let rhs: Complex64 = x.data().iter().zip(pty.data()).map(|(a, b)| a.conj() * b).sum();
        let scale = px.iter().map(|t| t.norm_sqr()).sum::<f64>().sqrt()
            * ys.iter().map(|t| t.norm_sqr()).sum::<f64>().sqrt();
        assert!((lhs - rhs).norm() / scale < 1e-10);
    }

    #[test]
    fn conformance_and_bounds_errors() {
        let grid = Grid::new_2d(6, 6).unwrap();
        let x = random_series(grid, 2, 1);
        let bad = PatchGroupIndex {
            grid,
            patch_dims: [3, 3, 1],
            groups: vec![PatchGroup { members: vec![grid.index(5, 5, 0)], distances: vec![0.0] }],
        };
        assert!(matches!(extract_tensors(&x, &bad), Err(Error::Conformance(_))));
        let good = PatchGroupIndex { groups: vec![PatchGroup { members: vec![0], distances: vec![0.0] }], ..bad };
        let wrong = vec![Tensor3::zeros([9, 2, 2])];
        assert!(aggregate(&wrong, &good, &[1.0, 2.0]).is_err());
    }
}
