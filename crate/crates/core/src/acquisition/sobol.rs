//! Sobol low-discrepancy sequence (Joe–Kuo direction numbers, Gray-code
//! ordering) with optional random digital shifts.

use crate::error::{NestError, Result};
use crate::net::data::{validate_bounds, Bound};

const BITS: u32 = 32;

/// Primitive polynomial (encoded with leading and trailing bits) and initial
/// direction numbers `m_1..m_s` for each dimension.
const DIRECTIONS: &[(u32, &[u32])] = &[
    (1, &[]),
    (3, &[1]),
    (7, &[1, 3]),
    (11, &[1, 3, 1]),
    (13, &[1, 1, 1]),
    (19, &[1, 1, 3, 3]),
    (25, &[1, 3, 5, 13]),
    (37, &[1, 1, 5, 5, 17]),
    (41, &[1, 1, 5, 5, 5]),
    (47, &[1, 1, 7, 11, 19]),
    (55, &[1, 1, 5, 1, 1]),
    (59, &[1, 1, 1, 3, 11]),
    (61, &[1, 3, 5, 5, 31]),
    (67, &[1, 3, 3, 9, 7, 49]),
    (91, &[1, 1, 1, 15, 21, 21]),
    (97, &[1, 3, 1, 13, 27, 49]),
    (103, &[1, 1, 1, 15, 7, 5]),
    (109, &[1, 3, 1, 15, 13, 25]),
    (115, &[1, 1, 5, 5, 19, 61]),
    (131, &[1, 3, 7, 11, 23, 15, 103]),
    (137, &[1, 3, 7, 13, 13, 15, 69]),
    (143, &[1, 1, 3, 13, 7, 35, 63]),
    (145, &[1, 3, 5, 9, 1, 25, 53]),
    (157, &[1, 3, 1, 13, 9, 35, 107]),
    (167, &[1, 3, 1, 5, 27, 61, 31]),
    (171, &[1, 1, 5, 11, 19, 41, 61]),
    (185, &[1, 3, 5, 3, 3, 13, 69]),
    (191, &[1, 1, 7, 13, 1, 19, 1]),
    (193, &[1, 3, 7, 5, 13, 19, 59]),
    (203, &[1, 1, 3, 9, 25, 29, 41]),
    (211, &[1, 3, 5, 13, 23, 1, 55]),
    (213, &[1, 3, 7, 3, 13, 59, 17]),
    (229, &[1, 3, 1, 3, 5, 53, 69]),
    (239, &[1, 1, 5, 5, 23, 33, 13]),
];

/// Largest supported dimension.
pub const MAX_SOBOL_DIM: usize = DIRECTIONS.len();

#[derive(Clone, Debug)]
pub struct Sobol {
    /// `v[d][k]` is direction number `k+1` of dimension `d`, left-aligned in 32 bits.
    v: Vec<[u32; BITS as usize]>,
}

impl Sobol {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_SOBOL_DIM {
            return Err(NestError::InvalidDimension(format!(
                "Sobol dimension must lie in 1..={MAX_SOBOL_DIM}, got {dim}"
            )));
        }
        let v = DIRECTIONS[..dim].iter().map(|&(poly, init)| directions(poly, init)).collect();
        Ok(Self { v })
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    /// Raw 32-bit coordinates of point `index`.
    pub fn point_bits(&self, index: u64) -> Vec<u32> {
        assert!(index < 1 << BITS, "Sobol index exceeds 2^32");
        let gray = index ^ (index >> 1);
        self.v
            .iter()
            .map(|dirs| {
                let mut x = 0u32;
                let mut g = gray;
                let mut k = 0;
                while g != 0 {
                    if g & 1 == 1 {
                        x ^= dirs[k];
                    }
                    g >>= 1;
                    k += 1;
                }
                x
            })
            .collect()
    }

    /// Point `index` in the unit cube. Index 0 is the origin.
    pub fn unit_point(&self, index: u64) -> Vec<f64> {
        self.point_bits(index).into_iter().map(to_unit).collect()
    }

    /// Point `index` XOR-shifted by `shift` (one 32-bit word per dimension).
    pub fn shifted_unit_point(&self, index: u64, shift: &[u32]) -> Vec<f64> {
        assert_eq!(shift.len(), self.dim(), "one shift word per dimension");
        self.point_bits(index)
            .into_iter()
            .zip(shift)
            .map(|(b, s)| to_unit(b ^ s))
            .collect()
    }
}

fn to_unit(bits: u32) -> f64 {
    bits as f64 / (1u64 << BITS) as f64
}

fn directions(poly: u32, init: &[u32]) -> [u32; BITS as usize] {
    let mut m = [0u32; BITS as usize];
    let s = (32 - poly.leading_zeros() - 1) as usize;
    if s == 0 {
        m.iter_mut().for_each(|v| *v = 1);
    } else {
        m[..s].copy_from_slice(init);
        let a = (poly >> 1) & ((1 << (s - 1)) - 1);
        for k in s..BITS as usize {
            let mut val = m[k - s] ^ (m[k - s] << s);
            for j in 1..s {
                if (a >> (s - 1 - j)) & 1 == 1 {
                    val ^= m[k - j] << j;
                }
            }
            m[k] = val;
        }
    }
    let mut v = [0u32; BITS as usize];
    for (k, (dst, &mk)) in v.iter_mut().zip(&m).enumerate() {
        *dst = mk << (BITS as usize - 1 - k);
    }
    v
}

/// Sobol point `index` mapped affinely into `bounds`.
pub fn sobol_point(index: u64, dim: usize, bounds: &[Bound]) -> Result<Vec<f64>> {
    if bounds.len() != dim {
        return Err(NestError::Shape {
            expected: dim,
            got: bounds.len(),
        });
    }
    validate_bounds(bounds)?;
    let unit = Sobol::new(dim)?.unit_point(index);
    Ok(unit.iter().zip(bounds).map(|(&u, b)| b.from_unit(u)).collect())
}
