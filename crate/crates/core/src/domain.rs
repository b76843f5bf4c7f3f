//! Randomization ranges, their partition into sub-domains, and sampling of
//! concrete domain-parameter vectors.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimKind {
    /// Multiplies a nominal physical constant.
    Rate,
    /// Added to a nominal value.
    Offset,
}

impl DimKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DimKind::Rate => "rate",
            DimKind::Offset => "offset",
        }
    }
}

impl std::str::FromStr for DimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rate" => Ok(DimKind::Rate),
            "offset" => Ok(DimKind::Offset),
            other => Err(Error::InvalidDomain(format!("unknown dimension kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dim {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub kind: DimKind,
}

/// Ordered set of randomized dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpace {
    dims: Vec<Dim>,
}

impl DomainSpace {
    pub fn new(dims: Vec<Dim>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidDomain("no dimensions".into()));
        }
        for (i, d) in dims.iter().enumerate() {
            if !(d.lo < d.hi) || !d.lo.is_finite() || !d.hi.is_finite() {
                return Err(Error::InvalidDomain(format!("`{}` needs lo < hi, got [{}, {}]", d.name, d.lo, d.hi)));
            }
            if dims[..i].iter().any(|e| e.name == d.name) {
                return Err(Error::InvalidDomain(format!("duplicate dimension `{}`", d.name)));
            }
        }
        Ok(Self { dims })
    }

    /// The randomized pendulum ranges.
    pub fn pendulum() -> Self {
        let d = |name: &str, lo, hi, kind| Dim { name: name.into(), lo, hi, kind };
        Self::new(vec![
            d("gravity", 0.7, 1.5, DimKind::Rate),
            d("timestep", 0.8, 1.2, DimKind::Rate),
            d("bar_mass", 0.8, 1.2, DimKind::Rate),
            d("bar_length", 0.8, 1.2, DimKind::Rate),
            d("actuator_gain", 0.7, 1.5, DimKind::Rate),
            d("actuator_bias", -0.5, 0.5, DimKind::Offset),
        ])
        .expect("static ranges are valid")
    }

    pub fn dims(&self) -> &[Dim] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.dims.iter().position(|d| d.name == name).ok_or_else(|| Error::UnknownDimension(name.into()))
    }

    /// The whole space as one sub-domain with index 1.
    pub fn full(&self) -> SubDomain {
        SubDomain { index: 1, restrictions: self.dims.iter().map(|d| (d.lo, d.hi)).collect() }
    }

    pub fn check_within(&self, xi: &DomainParamVector) -> Result<()> {
        if xi.values.len() != self.dims.len() {
            return Err(Error::DimensionMismatch { expected: self.dims.len(), got: xi.values.len() });
        }
        for (d, &v) in self.dims.iter().zip(&xi.values) {
            if !(v >= d.lo && v <= d.hi) {
                return Err(Error::OutOfDomain { name: d.name.clone(), value: v, lo: d.lo, hi: d.hi });
            }
        }
        Ok(())
    }

    /// Map each component to `[0, 1]` over its full range.
    pub fn normalize(&self, xi: &DomainParamVector) -> Vec<f64> {
        self.dims.iter().zip(&xi.values).map(|(d, v)| (v - d.lo) / (d.hi - d.lo)).collect()
    }
}

/// Restriction of the full space; `index` runs from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SubDomain {
    pub index: usize,
    pub restrictions: Vec<(f64, f64)>,
}

impl SubDomain {
    pub fn contains(&self, xi: &DomainParamVector) -> Result<bool> {
        contains(self, xi)
    }

    pub fn volume_fraction(&self, space: &DomainSpace) -> f64 {
        self.restrictions.iter().zip(space.dims()).map(|((lo, hi), d)| (hi - lo) / (d.hi - d.lo)).product()
    }
}

/// Concrete parameter vector drawn from sub-domain `subdomain`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainParamVector {
    pub values: Vec<f64>,
    pub subdomain: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMethod {
    /// Equal-width slabs along the first split dimension.
    Plane,
    /// Equal-volume boxes cut off one at a time, alternating the axis, so
    /// every new box meets the previous one at a right-angled face.
    Edge,
    /// Equal blocks over all split dimensions, visited in snake order.
    Grid,
}

impl PartitionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PartitionMethod::Plane => "plane",
            PartitionMethod::Edge => "edge",
            PartitionMethod::Grid => "grid",
        }
    }
}

impl std::fmt::Display for PartitionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PartitionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(Self::Plane),
            "edge" => Ok(Self::Edge),
            "grid" => Ok(Self::Grid),
            other => Err(Error::InvalidDomain(format!("unknown partition method `{other}`"))),
        }
    }
}

fn cut(lo: f64, hi: f64, k: usize, n: usize) -> f64 {
    if k == 0 {
        lo
    } else if k == n {
        hi
    } else {
        lo + (hi - lo) * (k as f64) / (n as f64)
    }
}

/// Most balanced factorization of `n` into `k` factors, each at least 2.
fn grid_shape(n: usize, k: usize) -> Option<Vec<usize>> {
    fn search(n: usize, k: usize, min: usize, acc: &mut Vec<usize>, best: &mut Option<Vec<usize>>) {
        if k == 1 {
            if n >= min {
                acc.push(n);
                let better = match best {
                    None => true,
                    Some(b) => acc.iter().max() < b.iter().max(),
                };
                if better {
                    *best = Some(acc.clone());
                }
                acc.pop();
            }
            return;
        }
        let mut f = min;
        while f * f <= n {
            if n % f == 0 {
                acc.push(f);
                search(n / f, k - 1, f, acc, best);
                acc.pop();
            }
            f += 1;
        }
    }
    let mut best = None;
    search(n, k, 2, &mut Vec::new(), &mut best);
    best
}

/// Split `space` into `n_parts` sub-domains over `split_dims`; consecutive
/// indices are spatial neighbours.
pub fn partition(space: &DomainSpace, n_parts: usize, method: PartitionMethod, split_dims: &[String]) -> Result<Vec<SubDomain>> {
    if n_parts == 0 {
        return Err(Error::NoSubDomains);
    }
    if split_dims.is_empty() {
        return Err(Error::InvalidDomain("no split dimension given".into()));
    }
    let axes = split_dims.iter().map(|n| space.index_of(n)).collect::<Result<Vec<_>>>()?;
    for (i, a) in axes.iter().enumerate() {
        if axes[..i].contains(a) {
            return Err(Error::InvalidDomain(format!("split dimension `{}` repeated", split_dims[i])));
        }
    }
    let full = space.full().restrictions;
    if n_parts == 1 {
        return Ok(vec![space.full()]);
    }
    let parts = match method {
        PartitionMethod::Plane => {
            let a = axes[0];
            let (lo, hi) = full[a];
            (0..n_parts)
                .map(|k| {
                    let mut r = full.clone();
                    r[a] = (cut(lo, hi, k, n_parts), cut(lo, hi, k + 1, n_parts));
                    r
                })
                .collect()
        }
        PartitionMethod::Edge => {
            let mut rest = full.clone();
            let mut out = Vec::with_capacity(n_parts);
            for k in 0..n_parts - 1 {
                let a = axes[k % axes.len()];
                let (lo, hi) = rest[a];
                let c = cut(lo, hi, 1, n_parts - k);
                let mut r = rest.clone();
                r[a] = (lo, c);
                out.push(r);
                rest[a] = (c, hi);
            }
            out.push(rest);
            out
        }
        PartitionMethod::Grid => {
            let shape = grid_shape(n_parts, axes.len()).ok_or(Error::NonFactorableGrid { n_parts, dims: axes.len() })?;
            let mut out = Vec::with_capacity(n_parts);
            let mut coord = vec![0usize; axes.len()];
            for _ in 0..n_parts {
                // Reflected mixed-radix order: an inner axis runs backwards
                // whenever the enclosing displayed coordinates sum to odd.
                let mut r = full.clone();
                let mut parity = 0;
                for (j, &a) in axes.iter().enumerate() {
                    let c = if parity % 2 == 1 { shape[j] - 1 - coord[j] } else { coord[j] };
                    let (lo, hi) = full[a];
                    r[a] = (cut(lo, hi, c, shape[j]), cut(lo, hi, c + 1, shape[j]));
                    parity += c;
                }
                out.push(r);
                for j in (0..axes.len()).rev() {
                    coord[j] += 1;
                    if coord[j] < shape[j] {
                        break;
                    }
                    coord[j] = 0;
                }
            }
            out
        }
    };
    Ok(parts.into_iter().enumerate().map(|(i, restrictions)| SubDomain { index: i + 1, restrictions }).collect())
}

/// Uniform independent draw from every restriction.
pub fn sample_params<R: Rng + ?Sized>(sub: &SubDomain, rng: &mut R) -> DomainParamVector {
    let values = sub
        .restrictions
        .iter()
        .map(|&(lo, hi)| {
            let u: f64 = rng.gen();
            if lo == hi { lo } else { (lo + (hi - lo) * u).clamp(lo, hi) }
        })
        .collect();
    DomainParamVector { values, subdomain: sub.index }
}

/// Inclusive membership test.
pub fn contains(sub: &SubDomain, xi: &DomainParamVector) -> Result<bool> {
    if xi.values.len() != sub.restrictions.len() {
        return Err(Error::DimensionMismatch { expected: sub.restrictions.len(), got: xi.values.len() });
    }
    Ok(sub.restrictions.iter().zip(&xi.values).all(|(&(lo, hi), &v)| v >= lo && v <= hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn gravity_plane_split_boundaries() {
        let space = DomainSpace::pendulum();
        let parts = partition(&space, 4, PartitionMethod::Plane, &names(&["gravity"])).unwrap();
        assert_eq!(parts.len(), 4);
        let expect = [0.7, 0.9, 1.1, 1.3, 1.5];
        for (k, p) in parts.iter().enumerate() {
            assert_eq!(p.index, k + 1);
            let (lo, hi) = p.restrictions[0];
            assert!((lo - expect[k]).abs() < 1e-12 && (hi - expect[k + 1]).abs() < 1e-12);
            assert_eq!(&p.restrictions[1..], &space.full().restrictions[1..]);
        }
        for w in parts.windows(2) {
            assert_eq!(w[0].restrictions[0].1, w[1].restrictions[0].0);
        }
    }

    #[test]
    fn single_part_is_the_full_space() {
        let space = DomainSpace::pendulum();
        for m in [PartitionMethod::Plane, PartitionMethod::Edge, PartitionMethod::Grid] {
            assert_eq!(partition(&space, 1, m, &names(&["gravity"])).unwrap(), vec![space.full()]);
        }
    }

    #[test]
    fn grid_two_by_two_covers_rectangle() {
        let space = DomainSpace::pendulum();
        let parts = partition(&space, 4, PartitionMethod::Grid, &names(&["gravity", "actuator_bias"])).unwrap();
        let area: f64 = parts.iter().map(|p| p.volume_fraction(&space)).sum();
        assert!((area - 1.0).abs() < 1e-12);
        // Monte-Carlo membership: every point lands in some block, interior
        // points in exactly one.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let full = space.full();
        for _ in 0..100_000 {
            let xi = sample_params(&full, &mut rng);
            let hits = parts.iter().filter(|p| p.contains(&xi).unwrap()).count();
            assert_eq!(hits, 1);
        }
    }

    #[test]
    fn grid_order_keeps_neighbours_adjacent() {
        let space = DomainSpace::pendulum();
        let parts = partition(&space, 6, PartitionMethod::Grid, &names(&["gravity", "timestep"])).unwrap();
        for w in parts.windows(2) {
            let shared = w[0]
                .restrictions
                .iter()
                .zip(&w[1].restrictions)
                .filter(|(a, b)| a.1 == b.0 || b.1 == a.0)
                .count();
            assert_eq!(shared, 1, "{:?} -> {:?}", w[0], w[1]);
        }
    }

    #[test]
    fn grid_errors() {
        let space = DomainSpace::pendulum();
        let err = partition(&space, 5, PartitionMethod::Grid, &names(&["gravity", "timestep"])).unwrap_err();
        assert!(matches!(err, Error::NonFactorableGrid { n_parts: 5, dims: 2 }));
        let err = partition(&space, 4, PartitionMethod::Plane, &names(&["wind"])).unwrap_err();
        assert!(matches!(err, Error::UnknownDimension(_)));
    }

    #[test]
    fn edge_boxes_have_equal_volume() {
        let space = DomainSpace::pendulum();
        let parts = partition(&space, 4, PartitionMethod::Edge, &names(&["gravity", "actuator_bias"])).unwrap();
        for p in &parts {
            assert!((p.volume_fraction(&space) - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_restriction_samples_exactly() {
        let sub = SubDomain { index: 1, restrictions: vec![(1.0, 1.0)] };
        let xi = sample_params(&sub, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(xi.values, vec![1.0]);
    }

    #[test]
    fn sample_mean_matches_interval_midpoint() {
        let sub = SubDomain { index: 1, restrictions: vec![(0.7, 0.9)] };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mean = (0..100_000).map(|_| sample_params(&sub, &mut rng).values[0]).sum::<f64>() / 1e5;
        assert!((mean - 0.8).abs() < 0.005);
    }

    #[test]
    fn sampling_is_deterministic() {
        let sub = DomainSpace::pendulum().full();
        let a = sample_params(&sub, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_params(&sub, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn shared_boundary_belongs_to_both_neighbours() {
        let space = DomainSpace::pendulum();
        let parts = partition(&space, 4, PartitionMethod::Plane, &names(&["gravity"])).unwrap();
        let mut xi = sample_params(&space.full(), &mut ChaCha8Rng::seed_from_u64(1));
        xi.values[0] = parts[0].restrictions[0].1;
        assert!(parts[0].contains(&xi).unwrap() && parts[1].contains(&xi).unwrap());
        xi.values[0] = 1.6;
        assert!(parts.iter().all(|p| !p.contains(&xi).unwrap()));
        let short = DomainParamVector { values: vec![1.0], subdomain: 1 };
        assert!(matches!(contains(&parts[0], &short), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn invalid_spaces_are_rejected() {
        let d = |n: &str, lo, hi| Dim { name: n.into(), lo, hi, kind: DimKind::Rate };
        assert!(DomainSpace::new(vec![d("a", 1.0, 1.0)]).is_err());
        assert!(DomainSpace::new(vec![d("a", 0.0, 1.0), d("a", 0.0, 2.0)]).is_err());
    }

    fn method() -> impl Strategy<Value = PartitionMethod> {
        prop_oneof![Just(PartitionMethod::Plane), Just(PartitionMethod::Edge), Just(PartitionMethod::Grid)]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn partitions_are_complete(n in 1usize..=16, m in method(), two in any::<bool>(), seed in any::<u64>()) {
            let space = DomainSpace::pendulum();
            let split = if two { names(&["gravity", "actuator_bias"]) } else { names(&["bar_mass"]) };
            let parts = match partition(&space, n, m, &split) {
                Ok(p) => p,
                Err(Error::NonFactorableGrid { .. }) => return Ok(()),
                Err(e) => panic!("{e}"),
            };
            prop_assert_eq!(parts.len(), n);
            let area: f64 = parts.iter().map(|p| p.volume_fraction(&space)).sum();
            prop_assert!((area - 1.0).abs() < 1e-9);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let full = space.full();
            for _ in 0..2_000 {
                let xi = sample_params(&full, &mut rng);
                let hits = parts.iter().filter(|p| p.contains(&xi).unwrap()).count();
                prop_assert!(hits >= 1);
            }
            for p in &parts {
                prop_assert!(p.contains(&sample_params(p, &mut rng)).unwrap());
                for (r, d) in p.restrictions.iter().zip(space.dims()) {
                    prop_assert!(r.0 >= d.lo && r.1 <= d.hi && r.0 <= r.1);
                }
            }
        }

        #[test]
        fn plane_neighbours_share_one_boundary(n in 2usize..=16) {
            let space = DomainSpace::pendulum();
            let parts = partition(&space, n, PartitionMethod::Plane, &names(&["gravity"])).unwrap();
            for w in parts.windows(2) {
                prop_assert_eq!(w[0].restrictions[0].1, w[1].restrictions[0].0);
            }
        }
    }
}
