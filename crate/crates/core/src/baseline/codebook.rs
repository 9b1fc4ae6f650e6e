use std::io::{Read, Write};

use rand::seq::index;

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{stream, Purpose};

/// `K` centroids in flattened patch space.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    dim: usize,
    centroids: Vec<f32>,
}

fn dist2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

impl Codebook {
    pub fn new(dim: usize, centroids: Vec<f32>) -> Result<Self> {
        if dim == 0 || centroids.len() % dim != 0 || centroids.len() / dim < 2 {
            return Err(Error::Config(format!("codebook needs at least 2 centroids of dim {dim}")));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("codebook centroids must be finite".into()));
        }
        Ok(Self { dim, centroids })
    }

    pub fn len(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, index: usize) -> &[f32] {
        &self.centroids[index * self.dim..(index + 1) * self.dim]
    }

    /// Nearest centroid by Euclidean distance; the lowest index wins ties.
    pub fn quantize(&self, patch: &[f32]) -> usize {
        assert_eq!(patch.len(), self.dim, "patch dimension");
        let mut best = (f64::INFINITY, 0);
        for i in 0..self.len() {
            let d = dist2(patch, self.centroid(i));
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    pub fn dequantize(&self, index: usize) -> Vec<f32> {
        self.centroid(index).to_vec()
    }

    /// Header of two little-endian u32 (`K`, `dim`), then `K * dim`
    /// little-endian f32.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in &self.centroids {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let k = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let dim = u32::from_le_bytes(word) as usize;
        let mut centroids = Vec::with_capacity(k * dim);
        for _ in 0..k * dim {
            r.read_exact(&mut word)?;
            centroids.push(f32::from_le_bytes(word));
        }
        Self::new(dim, centroids)
    }
}

/// Deterministic k-means (Lloyd iterations) from `k` distinct patches
/// drawn with `seed`. A cluster that empties is re-seeded with the point
/// farthest from its current centroid.
pub fn fit_codebook(patches: &[Vec<f32>], k: usize, iters: usize, seed: u64) -> Result<Codebook> {
    let dim = patches.first().map_or(0, Vec::len);
    let mut distinct: Vec<&Vec<f32>> = Vec::new();
    {
        let mut sorted: Vec<&Vec<f32>> = patches.iter().collect();
        sorted.sort_by(|a, b| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
        sorted.dedup();
        distinct.extend(sorted);
    }
    if k < 2 || distinct.len() < k {
        return Err(Error::InsufficientData { needed: k.max(2), found: distinct.len() });
    }
    let mut rng = stream(seed, Purpose::Codebook, 0);
    let mut pick = index::sample(&mut rng, distinct.len(), k).into_vec();
    pick.sort_unstable();
    let mut centroids: Vec<f32> = pick.iter().flat_map(|&i| distinct[i].iter().copied()).collect();
    let mut assign = vec![usize::MAX; patches.len()];
    for _ in 0..iters {
        let book = Codebook { dim, centroids: centroids.clone() };
        let next: Vec<usize> = par::map_collect(patches, |p| book.quantize(p));
        let changed = next != assign;
        assign = next;
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &a) in patches.iter().zip(&assign) {
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
                *s += v as f64;
            }
        }
        let mut taken = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = (s / counts[c] as f64) as f32;
                }
            } else {
                let far = (0..patches.len())
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| {
                        let da = dist2(&patches[a], book.centroid(assign[a]));
                        let db = dist2(&patches[b], book.centroid(assign[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("more patches than clusters");
                taken.push(far);
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&patches[far]);
            }
        }
        if !changed && taken.is_empty() {
            break;
        }
    }
    Codebook::new(dim, centroids)
}
