use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Point;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HilbertVariant {
    Hilbert,
    /// The curve evaluated with the `x` and `y` axes swapped.
    TransHilbert,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HilbertOrder {
    pub perm: Vec<usize>,
    /// Curve index of every point, in input order.
    pub keys: Vec<u64>,
    /// Bits per axis.
    pub order: u32,
    /// Set when every point fell into one grid cell.
    pub warning: Option<String>,
}

/// Index of cell `cell` along a 3D Hilbert curve with `bits` bits per axis.
pub fn hilbert_index(cell: [u32; 3], bits: u32) -> u64 {
    let mut x = cell;
    let n = x.len();
    if bits > 1 {
        let mut q = 1u32 << (bits - 1);
        while q > 1 {
            let p = q - 1;
            for i in 0..n {
                if x[i] & q != 0 {
                    x[0] ^= p;
                } else {
                    let t = (x[0] ^ x[i]) & p;
                    x[0] ^= t;
                    x[i] ^= t;
                }
            }
            q >>= 1;
        }
    }
    for i in 1..n {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    let mut q = if bits > 0 { 1u32 << (bits - 1) } else { 0 };
    while q > 1 {
        if x[n - 1] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for v in &mut x {
        *v ^= t;
    }
    let mut key = 0u64;
    for b in (0..bits).rev() {
        for v in x {
            key = (key << 1) | ((v >> b) & 1) as u64;
        }
    }
    key
}

/// Quantises coordinates to cubes of side `grid_size` anchored at the
/// bounding-box minimum and stable-sorts points by Hilbert index.
pub fn hilbert_serialize(
    coords: &[Point],
    grid_size: f64,
    variant: HilbertVariant,
) -> Result<HilbertOrder> {
    if !(grid_size > 0.0) || !grid_size.is_finite() {
        return Err(Error::Domain(format!(
            "grid size {grid_size} must be positive"
        )));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in coords {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let order = if extent > 0.0 {
        (extent / grid_size).log2().ceil().clamp(1.0, 16.0) as u32
    } else {
        1
    };
    let max_cell = (1u32 << order) - 1;
    let cells: Vec<[u32; 3]> = coords
        .iter()
        .map(|p| {
            let mut c = [0u32; 3];
            for a in 0..3 {
                c[a] = (((p[a] - lo[a]) / grid_size).floor().max(0.0) as u32).min(max_cell);
            }
            if variant == HilbertVariant::TransHilbert {
                c.swap(0, 1);
            }
            c
        })
        .collect();
    let keys: Vec<u64> = cells.iter().map(|&c| hilbert_index(c, order)).collect();
    let mut perm: Vec<usize> = (0..coords.len()).collect();
    perm.sort_by_key(|&i| keys[i]);
    let warning = (coords.len() > 1 && cells.iter().all(|c| *c == cells[0])).then(|| {
        let msg = format!(
            "grid size {grid_size} places all {} points in one cell",
            coords.len()
        );
        log::warn!("{msg}");
        msg
    });
    Ok(HilbertOrder {
        perm,
        keys,
        order,
        warning,
    })
}

/// Mean `|rank(p) − rank(nn(p))|` over points, `nn` being the nearest other
/// point (lowest index on ties). Smaller means neighbours stay close in the
/// sequence.
pub fn locality(coords: &[Point], perm: &[usize]) -> f64 {
    let n = coords.len();
    if n < 2 {
        return 0.0;
    }
    let mut rank = vec![0usize; n];
    for (r, &i) in perm.iter().enumerate() {
        rank[i] = r;
    }
    let d2 = |a: &Point, b: &Point| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    let total: usize = (0..n)
        .map(|i| {
            let nn = (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| d2(&coords[i], &coords[a]).total_cmp(&d2(&coords[i], &coords[b])))
                .expect("n ≥ 2");
            rank[i].abs_diff(rank[nn])
        })
        .sum();
    total as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_one_is_gray_code() {
        // the first-order curve visits the 8 octants in reflected Gray-code order
        for i in 0u64..8 {
            let gray = i ^ (i >> 1);
            let cell = [
                ((gray >> 2) & 1) as u32,
                ((gray >> 1) & 1) as u32,
                (gray & 1) as u32,
            ];
            assert_eq!(hilbert_index(cell, 1), i);
        }
    }

    #[test]
    fn bijective_on_small_grid() {
        for bits in 1..=3u32 {
            let side = 1u32 << bits;
            let mut seen = vec![false; (side * side * side) as usize];
            for x in 0..side {
                for y in 0..side {
                    for z in 0..side {
                        let k = hilbert_index([x, y, z], bits) as usize;
                        assert!(!seen[k]);
                        seen[k] = true;
                    }
                }
            }
        }
    }

    #[test]
    fn consecutive_cells_are_adjacent() {
        let bits = 3;
        let side = 1u32 << bits;
        let mut by_key = vec![[0u32; 3]; (side * side * side) as usize];
        for x in 0..side {
            for y in 0..side {
                for z in 0..side {
                    by_key[hilbert_index([x, y, z], bits) as usize] = [x, y, z];
                }
            }
        }
        for w in by_key.windows(2) {
            let dist: u32 = (0..3).map(|a| w[0][a].abs_diff(w[1][a])).sum();
            assert_eq!(dist, 1);
        }
    }

    #[test]
    fn square_of_four_follows_u() {
        let c = [
            [1.0, 1.0, 0.0],
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
        ];
        let h = hilbert_serialize(&c, 1.0, HilbertVariant::Hilbert).unwrap();
        // (0,0) → (0,1) → (1,1) → (1,0)
        assert_eq!(h.perm, vec![1, 3, 0, 2]);
        let t = hilbert_serialize(&c, 1.0, HilbertVariant::TransHilbert).unwrap();
        assert_eq!(t.perm, vec![1, 2, 0, 3]);
    }

    #[test]
    fn coarse_grid_is_identity_with_warning() {
        let c = [[0.1, 0.2, 0.3], [0.0, 0.05, 0.1], [0.2, 0.1, 0.0]];
        let h = hilbert_serialize(&c, 10.0, HilbertVariant::Hilbert).unwrap();
        assert_eq!(h.perm, vec![0, 1, 2]);
        assert!(h.warning.is_some());
    }

    #[test]
    fn non_positive_grid_rejected() {
        assert!(hilbert_serialize(&[[0.0; 3]], 0.0, HilbertVariant::Hilbert).is_err());
    }
}
