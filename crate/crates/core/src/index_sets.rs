//! Index sets α ⊂ 𝒲: the weight-space locations whose values are learned
//! explicitly, and column families α₁…α_J.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};

/// The domain a weight vector is indexed by.
///
/// Grid indices enumerate `(y, x, c)` row-major with the channel fastest,
/// the same order used to vectorize filters and images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSpace {
    Grid2d {
        height: usize,
        width: usize,
        channels: usize,
    },
    Flat {
        n: usize,
    },
}

/// A point of a [`WeightSpace`]. Flat spaces are one-dimensional: `x` holds
/// the index and `y = c = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub y: usize,
    pub x: usize,
    pub c: usize,
}

impl WeightSpace {
    pub fn grid(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape("WeightSpace::grid", "zero extent"));
        }
        Ok(WeightSpace::Grid2d {
            height,
            width,
            channels,
        })
    }

    pub fn flat(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::shape("WeightSpace::flat", "zero size"));
        }
        Ok(WeightSpace::Flat { n })
    }

    /// `n_v`, the number of points.
    pub fn size(&self) -> usize {
        match *self {
            WeightSpace::Grid2d {
                height,
                width,
                channels,
            } => height * width * channels,
            WeightSpace::Flat { n } => n,
        }
    }

    pub fn channels(&self) -> usize {
        match *self {
            WeightSpace::Grid2d { channels, .. } => channels,
            WeightSpace::Flat { .. } => 1,
        }
    }

    /// Number of distinct spatial positions (ignoring channels).
    pub fn spatial_size(&self) -> usize {
        self.size() / self.channels()
    }

    pub fn coord(&self, i: usize) -> Result<Coord> {
        if i >= self.size() {
            return Err(Error::Index {
                index: i,
                size: self.size(),
            });
        }
        Ok(match *self {
            WeightSpace::Grid2d {
                width, channels, ..
            } => Coord {
                y: i / (width * channels),
                x: (i / channels) % width,
                c: i % channels,
            },
            WeightSpace::Flat { .. } => Coord { y: 0, x: i, c: 0 },
        })
    }

    /// Squared spatial distance between two points; channels are ignored.
    pub fn spatial_dist2(&self, i: usize, j: usize) -> Result<f64> {
        let (a, b) = (self.coord(i)?, self.coord(j)?);
        let dy = a.y as f64 - b.y as f64;
        let dx = a.x as f64 - b.x as f64;
        Ok(dy * dy + dx * dx)
    }
}

/// An ordered set of distinct locations in a [`WeightSpace`]. Indices are
/// kept in ascending (canonical) order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "IndexSetRepr")]
pub struct IndexSet {
    space: WeightSpace,
    indices: Vec<usize>,
}

#[derive(Deserialize)]
struct IndexSetRepr {
    space: WeightSpace,
    indices: Vec<usize>,
}

impl TryFrom<IndexSetRepr> for IndexSet {
    type Error = Error;

    fn try_from(r: IndexSetRepr) -> Result<Self> {
        IndexSet::new(r.space, r.indices)
    }
}

impl IndexSet {
    /// Sorts `indices` and checks they are distinct, in range and non-empty.
    pub fn new(space: WeightSpace, mut indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::DegenerateFraction {
                fraction: 0.0,
                domain: space.size(),
            });
        }
        indices.sort_unstable();
        if let Some(&bad) = indices.iter().find(|&&i| i >= space.size()) {
            return Err(Error::Index {
                index: bad,
                size: space.size(),
            });
        }
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::shape("IndexSet::new", "duplicate indices"));
        }
        Ok(Self { space, indices })
    }

    /// Every index of `space`.
    pub fn full(space: WeightSpace) -> Self {
        Self {
            space,
            indices: (0..space.size()).collect(),
        }
    }

    pub fn space(&self) -> WeightSpace {
        self.space
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// `n_α`.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// Position of weight-space index `i` within α, if present.
    pub fn position(&self, i: usize) -> Option<usize> {
        self.indices.binary_search(&i).ok()
    }
}

/// Number of elements a fraction selects from a domain:
/// `round(fraction × domain)`, rejected when that is zero.
pub fn alpha_count(fraction: f64, domain: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::DegenerateFraction { fraction, domain });
    }
    let k = (fraction * domain as f64).round() as usize;
    if k == 0 {
        return Err(Error::DegenerateFraction { fraction, domain });
    }
    Ok(k.min(domain))
}

fn choose_without_replacement<R: Rng>(rng: &mut R, domain: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..domain).collect();
    let (chosen, _) = pool.partial_shuffle(rng, k);
    chosen.to_vec()
}

/// Draws α uniformly at random without replacement.
///
/// With `tie_channels` on a grid space, `round(fraction · h · w)` spatial
/// positions are drawn and every channel at those positions is included.
/// The result depends only on the arguments.
pub fn sample_alpha(space: WeightSpace, fraction: f64, seed: u64, tie_channels: bool) -> Result<IndexSet> {
    let mut rng = rng_from_seed(seed);
    let tied = tie_channels && matches!(space, WeightSpace::Grid2d { .. });
    let indices = if tied {
        let c = space.channels();
        let k = alpha_count(fraction, space.spatial_size())?;
        choose_without_replacement(&mut rng, space.spatial_size(), k)
            .into_iter()
            .flat_map(|p| (0..c).map(move |ch| p * c + ch))
            .collect()
    } else {
        let k = alpha_count(fraction, space.size())?;
        choose_without_replacement(&mut rng, space.size(), k)
    };
    IndexSet::new(space, indices)
}

/// α₁ … α_J over one shared weight space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnFamily {
    columns: Vec<IndexSet>,
}

impl ColumnFamily {
    pub fn new(columns: Vec<IndexSet>) -> Result<Self> {
        let first = columns
            .first()
            .ok_or_else(|| Error::Config("a column family needs at least one column".into()))?;
        if columns.iter().any(|c| c.space() != first.space()) {
            return Err(Error::shape("ColumnFamily::new", "columns index different weight spaces"));
        }
        Ok(Self { columns })
    }

    pub fn columns(&self) -> &[IndexSet] {
        &self.columns
    }

    pub fn into_columns(self) -> Vec<IndexSet> {
        self.columns
    }

    /// `J`.
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn space(&self) -> WeightSpace {
        self.columns[0].space()
    }
}

/// `j` independent channel-tied draws; column `k` uses seed
/// `derive_seed(seed, k)`. Columns may overlap.
pub fn make_columns(space: WeightSpace, j: usize, fraction: f64, seed: u64) -> Result<ColumnFamily> {
    if j == 0 {
        return Err(Error::Config("number of columns must be >= 1".into()));
    }
    let columns = (0..j)
        .map(|k| sample_alpha(space, fraction, derive_seed(seed, k as u64), true))
        .collect::<Result<Vec<_>>>()?;
    ColumnFamily::new(columns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn full_fraction_is_canonical_order() {
        let a = sample_alpha(WeightSpace::flat(784).unwrap(), 1.0, 3, false).unwrap();
        assert_eq!(a.indices(), (0..784).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn tied_grid_sample() {
        let space = WeightSpace::grid(8, 8, 3).unwrap();
        let a = sample_alpha(space, 0.25, 9, true).unwrap();
        assert_eq!(a.len(), 48);
        let mut by_pos: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
        for &i in a.indices() {
            let c = space.coord(i).unwrap();
            by_pos.entry((c.y, c.x)).or_default().push(c.c);
        }
        assert_eq!(by_pos.len(), 16);
        assert!(by_pos.values().all(|chs| chs == &vec![0, 1, 2]));
    }

    #[test]
    fn untied_grid_sample_counts_all_points() {
        let space = WeightSpace::grid(4, 4, 2).unwrap();
        assert_eq!(sample_alpha(space, 0.5, 1, false).unwrap().len(), 16);
    }

    #[test]
    fn seeds_control_draws() {
        let space = WeightSpace::flat(100).unwrap();
        assert_eq!(
            sample_alpha(space, 0.1, 42, false).unwrap(),
            sample_alpha(space, 0.1, 42, false).unwrap()
        );
        // Two independent size-10 draws from 100 share 10·10/100 = 1 element on average.
        let trials = 1000;
        let mut total = 0usize;
        for t in 0..trials {
            let a: HashSet<usize> = sample_alpha(space, 0.1, 2 * t, false).unwrap().indices().iter().copied().collect();
            let b = sample_alpha(space, 0.1, 2 * t + 1, false).unwrap();
            assert_eq!(a.len(), 10);
            total += b.indices().iter().filter(|i| a.contains(i)).count();
        }
        let mean = total as f64 / trials as f64;
        assert!((mean - 1.0).abs() < 0.15, "mean overlap {mean}");
    }

    #[test]
    fn degenerate_fractions_are_rejected() {
        let space = WeightSpace::flat(10).unwrap();
        for f in [0.0, -0.5, 1.5, f64::NAN, 0.01] {
            assert!(matches!(
                sample_alpha(space, f, 0, false),
                Err(Error::DegenerateFraction { .. })
            ));
        }
    }

    #[test]
    fn column_families() {
        let space = WeightSpace::flat(784).unwrap();
        let one = make_columns(space, 1, 0.3, 5).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.columns()[0], sample_alpha(space, 0.3, derive_seed(5, 0), true).unwrap());

        let fam = make_columns(space, 10, 0.1, 7).unwrap();
        assert_eq!(fam.len(), 10);
        assert!(fam.columns().iter().all(|c| c.len() == 78));
        assert_ne!(fam.columns()[0], fam.columns()[1]);

        let again = make_columns(space, 10, 0.1, 7).unwrap();
        assert_eq!(fam, again);
        assert!(matches!(make_columns(space, 0, 0.1, 7), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_invalid_sets() {
        let space = WeightSpace::flat(5).unwrap();
        assert!(IndexSet::new(space, vec![1, 1]).is_err());
        assert!(matches!(IndexSet::new(space, vec![5]), Err(Error::Index { .. })));
        assert!(IndexSet::new(space, vec![]).is_err());
    }

    proptest! {
        #[test]
        fn samples_are_valid_and_deterministic(
            h in 1usize..9, w in 1usize..9, c in 1usize..4,
            fraction in 0.05f64..=1.0, seed in any::<u64>(), tie in any::<bool>(),
        ) {
            let space = WeightSpace::grid(h, w, c).unwrap();
            match sample_alpha(space, fraction, seed, tie) {
                Ok(a) => {
                    prop_assert!(a.indices().windows(2).all(|p| p[0] < p[1]));
                    prop_assert!(a.indices().iter().all(|&i| i < space.size()));
                    prop_assert!(!a.is_empty() && a.len() <= space.size());
                    if tie {
                        let pairs: HashSet<(usize, usize)> = a.indices().iter()
                            .map(|&i| { let p = space.coord(i).unwrap(); (p.y, p.x) }).collect();
                        prop_assert_eq!(pairs.len() * c, a.len());
                    }
                    prop_assert_eq!(a, sample_alpha(space, fraction, seed, tie).unwrap());
                }
                Err(e) => prop_assert!(matches!(e, Error::DegenerateFraction { .. }), "unexpected error {:?}", e),
            }
        }
    }
}
