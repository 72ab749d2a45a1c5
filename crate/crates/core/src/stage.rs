//! Light stage construction and the neighbor machinery built on it.
//!
//! A stage is a set of unit light directions plus a spherical triangulation.
//! Stages are icosphere vertices with an optional list of removed lights
//! (camera holes); the triangulation over the surviving lights is the convex
//! hull of the directions, which on the sphere is the spherical Delaunay
//! triangulation and leaves untouched icosphere faces in place.

use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

/// Largest supported icosphere subdivision level.
pub const MAX_SUBDIVISION: u32 = 5;

const HULL_EPS: f64 = 1e-12;
const INSIDE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightStage {
    lights: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    mean_spacing: f64,
}

/// Neighbor selection policy for [`LightStage::select_active_set`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    /// Uniform random `k`-subset of the `m` nearest lights.
    Train,
    /// The `k` nearest lights, optionally excluding a held-out light.
    Eval { holdout: Option<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActiveSet {
    pub query: Vec3,
    pub candidate_count: usize,
    pub size: usize,
    /// Selected light indices in ascending order.
    pub indices: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AliasFreeWeights {
    pub weights: Vec<f64>,
    pub sharpness: f64,
    /// Set when every active light is equidistant from the query and the
    /// weights fell back to uniform.
    pub degenerate: bool,
}

impl LightStage {
    /// Builds an icosphere stage and removes the listed lights.
    pub fn build(subdivision: u32, drop_indices: &[usize]) -> Result<Self> {
        if subdivision > MAX_SUBDIVISION {
            return Err(Error::InvalidArgument(format!(
                "subdivision {subdivision} exceeds {MAX_SUBDIVISION}"
            )));
        }
        let (verts, faces) = icosphere(subdivision);
        if drop_indices.is_empty() {
            return Self::from_parts(verts, faces);
        }
        Ok(Self::drop_lights(verts, faces, drop_indices)?.0)
    }

    /// This stage minus the listed lights, re-triangulated, and the old
    /// index of every kept light.
    pub fn without(&self, drop_indices: &[usize]) -> Result<(Self, Vec<usize>)> {
        Self::drop_lights(self.lights.clone(), self.triangles.clone(), drop_indices)
    }

    fn drop_lights(verts: Vec<Vec3>, faces: Vec<[usize; 3]>, drop_indices: &[usize]) -> Result<(Self, Vec<usize>)> {
        let n = verts.len();
        let mut dropped = vec![false; n];
        for &i in drop_indices {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, n });
            }
            dropped[i] = true;
        }
        let mut remap = vec![usize::MAX; n];
        let mut lights = Vec::new();
        let mut keep = Vec::new();
        for (i, v) in verts.iter().enumerate() {
            if !dropped[i] {
                remap[i] = lights.len();
                lights.push(*v);
                keep.push(i);
            }
        }
        if lights.len() < 4 {
            return Err(Error::Triangulation(format!(
                "only {} lights left after drops",
                lights.len()
            )));
        }

        let kept: Vec<[usize; 3]> = faces
            .iter()
            .filter(|f| f.iter().all(|&v| !dropped[v]))
            .map(|f| [remap[f[0]], remap[f[1]], remap[f[2]]])
            .collect();
        let hull = convex_hull(&lights)?;
        let hull_keys: HashSet<[usize; 3]> = hull.iter().map(|t| canonical(*t)).collect();
        let triangles = if kept.iter().all(|t| hull_keys.contains(&canonical(*t))) {
            // untouched faces stay as they were; the holes get the hull's fill
            let kept_keys: HashSet<[usize; 3]> = kept.iter().map(|t| canonical(*t)).collect();
            let mut tris = kept;
            tris.extend(hull.into_iter().filter(|t| !kept_keys.contains(&canonical(*t))));
            tris
        } else {
            hull
        };
        Ok((Self::from_parts(lights, triangles)?, keep))
    }

    /// Assembles a stage from explicit directions and triangles, normalizing
    /// the directions and validating the triangulation.
    pub fn from_parts(lights: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = lights.len();
        if n < 4 {
            return Err(Error::InvalidArgument(format!("a stage needs at least 4 lights, got {n}")));
        }
        let mut lights_norm = Vec::with_capacity(n);
        for (i, l) in lights.iter().enumerate() {
            let norm = l.norm();
            if !norm.is_finite() || norm < 1e-12 {
                return Err(Error::InvalidArgument(format!("light {i} has no direction")));
            }
            // already-unit input skips renormalization so stored stages
            // round-trip exactly
            let unit = if (norm - 1.0).abs() <= 1e-8 { *l } else { l / norm };
            lights_norm.push(unit.map(round_sig9));
        }
        let mut covered = vec![false; n];
        let mut oriented = Vec::with_capacity(triangles.len());
        for t in &triangles {
            for &v in t {
                if v >= n {
                    return Err(Error::IndexOutOfRange { index: v, n });
                }
                covered[v] = true;
            }
            let [a, b, c] = *t;
            let (pa, pb, pc) = (lights_norm[a], lights_norm[b], lights_norm[c]);
            let normal = (pb - pa).cross(&(pc - pa));
            if normal.dot(&(pa + pb + pc)) < 0.0 {
                oriented.push([a, c, b]);
            } else {
                oriented.push(*t);
            }
        }
        if let Some(i) = covered.iter().position(|c| !c) {
            return Err(Error::Triangulation(format!("light {i} is in no triangle")));
        }
        let mean_spacing = mean_nearest_angle(&lights_norm);
        if mean_spacing.is_nan() || min_pairwise_angle(&lights_norm) <= 1e-6 {
            return Err(Error::InvalidArgument("duplicate light directions".into()));
        }
        Ok(Self {
            lights: lights_norm,
            triangles: oriented,
            mean_spacing,
        })
    }

    pub fn n(&self) -> usize {
        self.lights.len()
    }

    pub fn lights(&self) -> &[Vec3] {
        &self.lights
    }

    pub fn light(&self, i: usize) -> Vec3 {
        self.lights[i]
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Mean over lights of the angle to the nearest other light, in radians.
    pub fn mean_spacing(&self) -> f64 {
        self.mean_spacing
    }

    /// The `m` lights closest to `dir`, nearest first. Ties go to the lower index.
    pub fn nearest_lights(&self, dir: &Vec3, m: usize) -> Result<Vec<usize>> {
        if m == 0 || m > self.n() {
            return Err(Error::InvalidArgument(format!(
                "m = {m} must lie in 1..={}",
                self.n()
            )));
        }
        let mut order = self.sorted_by_angle(dir);
        order.truncate(m);
        Ok(order)
    }

    fn sorted_by_angle(&self, dir: &Vec3) -> Vec<usize> {
        let dots: Vec<f64> = self.lights.iter().map(|l| l.dot(dir)).collect();
        let mut order: Vec<usize> = (0..self.n()).collect();
        // larger dot = smaller angle
        order.sort_by(|&a, &b| dots[b].total_cmp(&dots[a]).then(a.cmp(&b)));
        order
    }

    pub fn select_active_set(
        &self,
        query: &Vec3,
        m: usize,
        k: usize,
        seed: u64,
        mode: SelectMode,
    ) -> Result<ActiveSet> {
        if k == 0 || k > m {
            return Err(Error::InvalidArgument(format!("need 1 <= k <= m, got k = {k}, m = {m}")));
        }
        if m > self.n() {
            return Err(Error::InvalidArgument(format!(
                "m = {m} exceeds the {} stage lights",
                self.n()
            )));
        }
        let mut indices = match mode {
            SelectMode::Train => {
                let candidates = self.nearest_lights(query, m)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rand::seq::index::sample(&mut rng, m, k)
                    .into_iter()
                    .map(|j| candidates[j])
                    .collect::<Vec<_>>()
            }
            SelectMode::Eval { holdout } => {
                if let Some(h) = holdout {
                    if h >= self.n() {
                        return Err(Error::IndexOutOfRange { index: h, n: self.n() });
                    }
                }
                let picked: Vec<usize> = self
                    .sorted_by_angle(query)
                    .into_iter()
                    .filter(|&i| Some(i) != holdout)
                    .take(k)
                    .collect();
                if picked.len() < k {
                    return Err(Error::InvalidArgument(format!(
                        "only {} lights remain after holdout, need {k}",
                        picked.len()
                    )));
                }
                picked
            }
        };
        indices.sort_unstable();
        Ok(ActiveSet {
            query: *query,
            candidate_count: m,
            size: k,
            indices,
            seed,
        })
    }

    /// Locates the spherical triangle containing `dir` and returns its index
    /// with barycentric weights for its three corners.
    pub fn barycentric_weights(&self, dir: &Vec3) -> Result<(usize, [f64; 3])> {
        for (ti, t) in self.triangles.iter().enumerate() {
            let [a, b, c] = t.map(|i| self.lights[i]);
            let wa = b.cross(&c).dot(dir);
            let wb = c.cross(&a).dot(dir);
            let wc = a.cross(&b).dot(dir);
            if wa >= -INSIDE_EPS && wb >= -INSIDE_EPS && wc >= -INSIDE_EPS {
                let w = [wa.max(0.0), wb.max(0.0), wc.max(0.0)];
                let sum: f64 = w.iter().sum();
                if sum <= 0.0 {
                    continue;
                }
                return Ok((ti, w.map(|x| x / sum)));
            }
        }
        Err(Error::Triangulation(format!(
            "no triangle contains direction ({:.6}, {:.6}, {:.6})",
            dir.x, dir.y, dir.z
        )))
    }

    /// Sharpness that puts the unnormalized weight at 0.5 for a light one
    /// mean spacing away.
    pub fn half_weight_sharpness(&self) -> f64 {
        std::f64::consts::LN_2 / (1.0 - self.mean_spacing.cos())
    }
}

/// Rounds to 9 significant decimal digits, the precision of stored
/// manifests. Idempotent.
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Default `(m, k)` for a stage of `n` lights.
pub fn default_neighbors(n: usize) -> (usize, usize) {
    const TABLE: [(usize, usize, usize); 5] = [
        (302, 16, 8),
        (250, 14, 7),
        (200, 12, 6),
        (150, 10, 5),
        (100, 8, 4),
    ];
    if n >= 302 {
        return (16, 8);
    }
    let &(_, m, k) = TABLE
        .iter()
        .min_by_key(|(size, _, _)| size.abs_diff(n))
        .expect("non-empty table");
    (m, k)
}

/// Offset spherical Gaussian weights over an active set.
///
/// Each raw weight is `exp(s (q·l - 1))` minus the smallest such value in the
/// set, so the farthest light sits at exactly zero and lights enter or leave
/// the set with zero weight.
pub fn alias_free_weights(query: &Vec3, active_dirs: &[Vec3], s: f64) -> Result<AliasFreeWeights> {
    if active_dirs.is_empty() {
        return Err(Error::InvalidArgument("empty active set".into()));
    }
    if !s.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite sharpness {s}")));
    }
    let dots: Vec<f64> = active_dirs.iter().map(|d| query.dot(d)).collect();
    let (weights, degenerate) = alias_free_from_dots(&dots, s);
    Ok(AliasFreeWeights {
        weights,
        sharpness: s,
        degenerate,
    })
}

/// Weight computation on precomputed dot products; shared with the network's
/// differentiable pooling.
pub fn alias_free_from_dots(dots: &[f64], s: f64) -> (Vec<f64>, bool) {
    let k = dots.len();
    let e: Vec<f64> = dots.iter().map(|d| (s * (d - 1.0)).exp()).collect();
    let floor = e.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = e.iter().map(|x| (x - floor).max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 && total.is_finite() {
        (raw.iter().map(|w| w / total).collect(), false)
    } else {
        (vec![1.0 / k as f64; k], true)
    }
}

fn canonical(t: [usize; 3]) -> [usize; 3] {
    let mut t = t;
    t.sort_unstable();
    t
}

fn mean_nearest_angle(lights: &[Vec3]) -> f64 {
    let n = lights.len();
    let total: f64 = (0..n)
        .map(|i| {
            let best = (0..n)
                .filter(|&j| j != i)
                .map(|j| lights[i].dot(&lights[j]))
                .fold(f64::NEG_INFINITY, f64::max);
            best.clamp(-1.0, 1.0).acos()
        })
        .sum();
    total / n as f64
}

fn min_pairwise_angle(lights: &[Vec3]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for i in 0..lights.len() {
        for j in i + 1..lights.len() {
            best = best.max(lights[i].dot(&lights[j]));
        }
    }
    if best >= 1.0 {
        return 0.0;
    }
    // acos loses precision near 1; use the chord instead
    2.0 * ((2.0 - 2.0 * best).max(0.0).sqrt() / 2.0).asin()
}

/// Icosphere vertices and outward-oriented faces.
pub fn icosphere(subdivision: u32) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivision {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    (verts, faces)
}

struct HullFace {
    v: [usize; 3],
    normal: Vec3,
    offset: f64,
    alive: bool,
}

impl HullFace {
    fn new(points: &[Vec3], v: [usize; 3]) -> Self {
        let [a, b, c] = v.map(|i| points[i]);
        let normal = (b - a).cross(&(c - a));
        let norm = normal.norm();
        let normal = if norm > 0.0 { normal / norm } else { normal };
        Self {
            v,
            normal,
            offset: normal.dot(&a),
            alive: true,
        }
    }

    fn height(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// Incremental convex hull of unit directions; fails unless the hull strictly
/// contains the origin (i.e. the triangles cover the whole sphere).
fn convex_hull(points: &[Vec3]) -> Result<Vec<[usize; 3]>> {
    let n = points.len();
    let fail = |msg: &str| Error::Triangulation(msg.to_string());

    // seed tetrahedron: 0, farthest from 0, farthest from that line, farthest from that plane
    let a = 0;
    let b = (1..n)
        .max_by(|&i, &j| {
            (points[i] - points[a])
                .norm()
                .total_cmp(&(points[j] - points[a]).norm())
        })
        .ok_or_else(|| fail("too few lights"))?;
    let line = (points[b] - points[a]).normalize();
    let c = (0..n)
        .filter(|&i| i != a && i != b)
        .max_by(|&i, &j| {
            let di = (points[i] - points[a]).cross(&line).norm();
            let dj = (points[j] - points[a]).cross(&line).norm();
            di.total_cmp(&dj)
        })
        .ok_or_else(|| fail("too few lights"))?;
    let plane = (points[b] - points[a]).cross(&(points[c] - points[a])).normalize();
    let d = (0..n)
        .filter(|&i| i != a && i != b && i != c)
        .max_by(|&i, &j| {
            let di = (points[i] - points[a]).dot(&plane).abs();
            let dj = (points[j] - points[a]).dot(&plane).abs();
            di.total_cmp(&dj)
        })
        .ok_or_else(|| fail("too few lights"))?;
    if (points[d] - points[a]).dot(&plane).abs() < 1e-9 {
        return Err(fail("lights are coplanar"));
    }
    let centroid = (points[a] + points[b] + points[c] + points[d]) / 4.0;
    let mut faces: Vec<HullFace> = Vec::new();
    for tri in [[a, b, c], [a, b, d], [a, c, d], [b, c, d]] {
        let mut f = HullFace::new(points, tri);
        if f.height(&centroid) > 0.0 {
            f = HullFace::new(points, [tri[0], tri[2], tri[1]]);
        }
        faces.push(f);
    }

    for p in 0..n {
        if p == a || p == b || p == c || p == d {
            continue;
        }
        let visible: Vec<usize> = faces
            .iter()
            .enumerate()
            .filter(|(_, f)| f.alive && f.height(&points[p]) > HULL_EPS)
            .map(|(i, _)| i)
            .collect();
        if visible.is_empty() {
            continue;
        }
        let mut edges: HashSet<(usize, usize)> = HashSet::new();
        for &fi in &visible {
            let [x, y, z] = faces[fi].v;
            edges.insert((x, y));
            edges.insert((y, z));
            edges.insert((z, x));
        }
        let mut horizon: Vec<(usize, usize)> = edges
            .iter()
            .filter(|&&(u, v)| !edges.contains(&(v, u)))
            .copied()
            .collect();
        horizon.sort_unstable();
        for &fi in &visible {
            faces[fi].alive = false;
        }
        for (u, v) in horizon {
            faces.push(HullFace::new(points, [u, v, p]));
        }
    }

    let hull: Vec<&HullFace> = faces.iter().filter(|f| f.alive).collect();
    if hull.iter().any(|f| f.offset <= INSIDE_EPS) {
        return Err(fail("remaining lights do not surround the sphere center"));
    }
    let mut used = vec![false; n];
    for f in &hull {
        for &v in &f.v {
            used[v] = true;
        }
    }
    if used.iter().any(|u| !u) {
        return Err(fail("a light fell inside the hull"));
    }
    Ok(hull.iter().map(|f| f.v).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_dir(rng: &mut impl Rng) -> Vec3 {
        loop {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n;
            }
        }
    }

    fn at_angle(query: &Vec3, deg: f64, azimuth: f64) -> Vec3 {
        let helper = if query.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let u = query.cross(&helper).normalize();
        let v = query.cross(&u);
        let (t, a) = (deg.to_radians(), azimuth);
        query * t.cos() + (u * a.cos() + v * a.sin()) * t.sin()
    }

    #[test]
    fn icosphere_counts() {
        for s in 0..=4u32 {
            let stage = LightStage::build(s, &[]).unwrap();
            let p = 4usize.pow(s);
            assert_eq!(stage.n(), 10 * p + 2);
            assert_eq!(stage.triangles().len(), 20 * p);
            for l in stage.lights() {
                assert!((l.norm() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn icosphere_faces_are_hull_faces() {
        for s in 0..=3u32 {
            let (v, f) = icosphere(s);
            let hull: HashSet<_> = convex_hull(&v).unwrap().into_iter().map(canonical).collect();
            assert_eq!(hull.len(), f.len());
            assert!(f.iter().all(|t| hull.contains(&canonical(*t))));
        }
    }

    #[test]
    fn rejects_bad_drops() {
        assert!(matches!(
            LightStage::build(1, &[42]),
            Err(Error::IndexOutOfRange { index: 42, n: 42 })
        ));
        // keep only lights in one hemisphere
        let (v, _) = icosphere(1);
        let drops: Vec<usize> = (0..v.len()).filter(|&i| v[i].z < 0.3).collect();
        assert!(matches!(LightStage::build(1, &drops), Err(Error::Triangulation(_))));
        assert!(LightStage::build(6, &[]).is_err());
    }

    #[test]
    fn dropped_stage_still_covers_sphere() {
        let stage = LightStage::build(2, &[3, 50, 101]).unwrap();
        assert_eq!(stage.n(), 159);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let d = random_dir(&mut rng);
            let (_, w) = stage.barycentric_weights(&d).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Euler: F = 2V - 4 for a sphere triangulation
        assert_eq!(stage.triangles().len(), 2 * stage.n() - 4);
    }

    #[test]
    fn without_matches_build_with_drops() {
        let full = LightStage::build(2, &[]).unwrap();
        let (a, keep) = full.without(&[3, 50, 101]).unwrap();
        let b = LightStage::build(2, &[3, 50, 101]).unwrap();
        assert_eq!(a.lights(), b.lights());
        assert_eq!(keep.len(), 159);
        assert_eq!(keep[3], 4);
        assert_eq!(a.triangles().len(), 2 * a.n() - 4);
    }

    #[test]
    fn nearest_basics() {
        let stage = LightStage::build(2, &[]).unwrap();
        let d = stage.light(17);
        assert_eq!(stage.nearest_lights(&d, 1).unwrap(), vec![17]);
        let all = stage.nearest_lights(&d, stage.n()).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..stage.n()).collect::<Vec<_>>());
        assert!(stage.nearest_lights(&d, stage.n() + 1).is_err());
    }

    #[test]
    fn nearest_edge_midpoint() {
        let stage = LightStage::build(2, &[]).unwrap();
        let [a, b, _] = stage.triangles()[5];
        let mid = (stage.light(a) + stage.light(b)).normalize();
        // brute force: sort by angle, indices ascending on ties
        let mut brute: Vec<(f64, usize)> = stage
            .lights()
            .iter()
            .enumerate()
            .map(|(i, l)| (l.dot(&mid).clamp(-1.0, 1.0).acos(), i))
            .collect();
        brute.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut want = vec![brute[0].1, brute[1].1];
        want.sort_unstable();
        let mut expected = vec![a, b];
        expected.sort_unstable();
        assert_eq!(want, expected);
        let got = stage.nearest_lights(&mid, 2).unwrap();
        let mut got_sorted = got.clone();
        got_sorted.sort_unstable();
        assert_eq!(got_sorted, expected);
    }

    #[test]
    fn active_set_modes() {
        let stage = LightStage::build(2, &[]).unwrap();
        let q = stage.light(40);
        let near = stage.nearest_lights(&q, 8).unwrap();
        let mut near_sorted = near.clone();
        near_sorted.sort_unstable();
        for seed in 0..5 {
            let a = stage.select_active_set(&q, 8, 8, seed, SelectMode::Train).unwrap();
            assert_eq!(a.indices, near_sorted);
        }
        let a = stage.select_active_set(&q, 16, 8, 3, SelectMode::Train).unwrap();
        let b = stage.select_active_set(&q, 16, 8, 3, SelectMode::Train).unwrap();
        assert_eq!(a, b);
        let cands = stage.nearest_lights(&q, 16).unwrap();
        assert!(a.indices.iter().all(|i| cands.contains(i)));
        let e = stage
            .select_active_set(&q, 16, 8, 0, SelectMode::Eval { holdout: Some(40) })
            .unwrap();
        assert!(!e.indices.contains(&40));
        assert_eq!(e.indices.len(), 8);
        assert!(stage.select_active_set(&q, 4, 8, 0, SelectMode::Train).is_err());
        let small = LightStage::build(0, &[]).unwrap();
        assert!(small
            .select_active_set(&small.light(0), 12, 12, 0, SelectMode::Eval { holdout: Some(0) })
            .is_err());
    }

    #[test]
    fn neighbor_schedule() {
        assert_eq!(default_neighbors(302), (16, 8));
        assert_eq!(default_neighbors(1000), (16, 8));
        assert_eq!(default_neighbors(250), (14, 7));
        assert_eq!(default_neighbors(200), (12, 6));
        assert_eq!(default_neighbors(150), (10, 5));
        assert_eq!(default_neighbors(100), (8, 4));
        assert_eq!(default_neighbors(162), (10, 5));
        assert_eq!(default_neighbors(42), (8, 4));
    }

    #[test]
    fn weights_symmetric_pair() {
        let q = Vec3::z();
        let dirs = [at_angle(&q, 10.0, 0.0), at_angle(&q, 10.0, 2.0), at_angle(&q, 25.0, 4.0)];
        let w = alias_free_weights(&q, &dirs, 12.0).unwrap();
        assert!(!w.degenerate);
        assert!((w.weights[0] - 0.5).abs() < 1e-12);
        assert!((w.weights[1] - 0.5).abs() < 1e-12);
        assert_eq!(w.weights[2], 0.0);
    }

    #[test]
    fn weights_ten_twenty_thirty() {
        // independent evaluation of the offset-Gaussian formula in f64
        let cos = |deg: f64| deg.to_radians().cos();
        let raw = |deg: f64| (20.0 * (cos(deg) - 1.0)).exp() - (20.0 * (cos(30.0) - 1.0)).exp();
        let (r1, r2) = (raw(10.0), raw(20.0));
        let expected = [r1 / (r1 + r2), r2 / (r1 + r2), 0.0];
        assert!((expected[0] - 0.7437).abs() < 1e-3);
        assert!((expected[1] - 0.2563).abs() < 1e-3);

        let q = Vec3::new(0.3, -0.2, 0.9).normalize();
        let dirs = [at_angle(&q, 10.0, 0.3), at_angle(&q, 20.0, 1.9), at_angle(&q, 30.0, 4.4)];
        let w = alias_free_weights(&q, &dirs, 20.0).unwrap();
        for (g, e) in w.weights.iter().zip(expected) {
            assert!((g - e).abs() < 1e-9);
        }
    }

    #[test]
    fn weights_degenerate_and_errors() {
        let q = Vec3::y();
        let dirs: Vec<Vec3> = (0..4).map(|i| at_angle(&q, 15.0, i as f64 * 1.5)).collect();
        let w = alias_free_weights(&q, &dirs, 9.0).unwrap();
        assert!(w.degenerate);
        assert_eq!(w.weights, vec![0.25; 4]);
        assert!(alias_free_weights(&q, &[], 1.0).is_err());
        assert!(alias_free_weights(&q, &dirs, f64::NAN).is_err());
    }

    #[test]
    fn weights_sharpness_limits() {
        let stage = LightStage::build(2, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let q = random_dir(&mut rng);
            let set = stage
                .select_active_set(&q, 8, 8, 0, SelectMode::Eval { holdout: None })
                .unwrap();
            let dirs: Vec<Vec3> = set.indices.iter().map(|&i| stage.light(i)).collect();
            let nearest = stage.nearest_lights(&q, 1).unwrap()[0];
            let pos = set.indices.iter().position(|&i| i == nearest).unwrap();
            let sharp = alias_free_weights(&q, &dirs, 1e4).unwrap();
            assert!(sharp.weights[pos] > 1.0 - 1e-3);

            // s -> 0: exp(s(d - 1)) - min ~ s (d - d_min), so the weights tend
            // to the normalized cosine offsets rather than to a flat average
            let soft = alias_free_weights(&q, &dirs, 1e-7).unwrap();
            let dmin = dirs.iter().map(|d| q.dot(d)).fold(f64::INFINITY, f64::min);
            let offs: Vec<f64> = dirs.iter().map(|d| q.dot(d) - dmin).collect();
            let total: f64 = offs.iter().sum();
            for (w, o) in soft.weights.iter().zip(&offs) {
                assert!((w - o / total).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn barycentric_vertex_and_edge() {
        let stage = LightStage::build(1, &[]).unwrap();
        for v in [0usize, 5, 30] {
            let (t, w) = stage.barycentric_weights(&stage.light(v)).unwrap();
            let pos = stage.triangles()[t].iter().position(|&i| i == v).unwrap();
            assert!((w[pos] - 1.0).abs() < 1e-12);
        }
        let [a, b, _] = stage.triangles()[7];
        let mid = (stage.light(a) + stage.light(b)).normalize();
        let (t, w) = stage.barycentric_weights(&mid).unwrap();
        let tri = stage.triangles()[t];
        let wa = w[tri.iter().position(|&i| i == a).unwrap()];
        let wb = w[tri.iter().position(|&i| i == b).unwrap()];
        assert!((wa - wb).abs() < 1e-9);
        assert!((wa + wb - 1.0).abs() < 1e-9);
    }

    #[test]
    fn barycentric_matches_exhaustive_scan() {
        let stage = LightStage::build(1, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let d = random_dir(&mut rng);
            // oracle: ray-plane intersection and planar barycentrics for every triangle
            let mut found = None;
            for (ti, t) in stage.triangles().iter().enumerate() {
                let [a, b, c] = t.map(|i| stage.light(i));
                let n = (b - a).cross(&(c - a));
                let denom = n.dot(&d);
                if denom <= 0.0 {
                    continue;
                }
                let p = d * (n.dot(&a) / denom);
                let area = n.norm();
                let la = (c - b).cross(&(p - b)).dot(&n) / (area * area);
                let lb = (a - c).cross(&(p - c)).dot(&n) / (area * area);
                let lc = 1.0 - la - lb;
                if la >= -1e-12 && lb >= -1e-12 && lc >= -1e-12 {
                    found = Some((ti, [la, lb, lc]));
                    break;
                }
            }
            let (t_ref, w_ref) = found.unwrap();
            let (t, w) = stage.barycentric_weights(&d).unwrap();
            assert_eq!(t, t_ref);
            for j in 0..3 {
                assert!((w[j] - w_ref[j]).abs() < 1e-9);
            }
        }
    }
}
