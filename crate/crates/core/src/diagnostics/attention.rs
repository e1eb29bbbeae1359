use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::model::AttentionRecord;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceUnit {
    Patch,
    Pixel,
}

/// Mean attention distance per layer and head, averaged over images.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnDistanceReport {
    pub layers: usize,
    pub heads: usize,
    /// Row-major `[layers, heads]`.
    pub distance: Vec<f64>,
    pub unit: DistanceUnit,
    pub images: usize,
}

impl AttnDistanceReport {
    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.distance[layer * self.heads + head]
    }

    pub fn layer_mean(&self, layer: usize) -> f64 {
        let row = &self.distance[layer * self.heads..(layer + 1) * self.heads];
        row.iter().sum::<f64>() / self.heads as f64
    }
}

/// Mean pairwise cosine similarity of the heads of each layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSimilarityReport {
    pub per_layer: Vec<f64>,
    pub images: usize,
}

/// Attention averaged over heads and images for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AvgAttentionMap {
    pub layer: usize,
    pub grid: (usize, usize),
    /// `[T, T]` including the CLS row and column.
    pub full: Tensor,
    /// `[N_patch, N_patch]` patch block, raster order.
    pub map: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatternScores {
    /// Share of attention mass within the diagonal band.
    pub diagonality: f64,
    /// Heaviest key column relative to a uniform map (uniform scores 1).
    pub column_concentration: f64,
}

/// Offset of the first patch token: 1 when a CLS token leads, else 0.
fn patch_offset(record: &AttentionRecord) -> Result<usize> {
    let (h, w) = record.grid;
    let n = h * w;
    if n == 0 {
        return Err(invalid("attention record has an empty patch grid"));
    }
    let s = record.probs.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(shape_err(format!("attention probabilities {s:?} are not [L, heads, T, T]")));
    }
    match s[2].checked_sub(n) {
        Some(off @ (0 | 1)) => Ok(off),
        _ => Err(shape_err(format!(
            "{} tokens do not fit a {h}x{w} grid",
            s[2]
        ))),
    }
}

/// Euclidean distances between patch centres, `[N, N]` in patch units.
pub fn grid_distances(h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    let mut d = Vec::with_capacity(n * n);
    for q in 0..n {
        for k in 0..n {
            let dy = (q / w) as f64 - (k / w) as f64;
            let dx = (q % w) as f64 - (k % w) as f64;
            d.push(dy.hypot(dx));
        }
    }
    d
}

/// Per-head distances of one image. Each query row of the patch block is
/// renormalized to sum to one after the CLS column is removed; rows with
/// no patch mass contribute zero.
fn image_distances(record: &AttentionRecord, dist: &[f64], off: usize) -> Vec<f64> {
    let n = record.grid.0 * record.grid.1;
    let t = record.tokens();
    let mut out = Vec::with_capacity(record.layers() * record.heads());
    for l in 0..record.layers() {
        for h in 0..record.heads() {
            let a = record.map(l, h);
            let mut total = 0.0;
            for q in 0..n {
                let row = &a[(q + off) * t + off..(q + off) * t + off + n];
                let mass: f64 = row.iter().sum();
                if mass > 0.0 {
                    let weighted: f64 = row.iter().zip(&dist[q * n..(q + 1) * n]).map(|(p, d)| p * d).sum();
                    total += weighted / mass;
                }
            }
            out.push(total / n as f64);
        }
    }
    out
}

fn check_consistent(records: &[AttentionRecord]) -> Result<usize> {
    let first = records.first().ok_or_else(|| invalid("no attention records"))?;
    let off = patch_offset(first)?;
    for r in records {
        if r.probs.shape() != first.probs.shape() || r.grid != first.grid {
            return Err(shape_err("attention records have inconsistent shapes"));
        }
    }
    Ok(off)
}

/// Mean attention distance of a single image, in patch units.
pub fn attention_distance(record: &AttentionRecord) -> Result<AttnDistanceReport> {
    attention_distance_over(std::slice::from_ref(record), DistanceUnit::Patch)
}

/// Per-image mean attention distances averaged over `records`.
pub fn attention_distance_over(records: &[AttentionRecord], unit: DistanceUnit) -> Result<AttnDistanceReport> {
    let off = check_consistent(records)?;
    let first = &records[0];
    let (h, w) = first.grid;
    let dist = grid_distances(h, w);
    let mut acc = vec![0.0; first.layers() * first.heads()];
    for r in records {
        acc.iter_mut()
            .zip(image_distances(r, &dist, off))
            .for_each(|(a, v)| *a += v);
    }
    let scale = match unit {
        DistanceUnit::Patch => 1.0,
        DistanceUnit::Pixel => first.patch_size as f64,
    };
    let m = records.len() as f64;
    Ok(AttnDistanceReport {
        layers: first.layers(),
        heads: first.heads(),
        distance: acc.into_iter().map(|v| v / m * scale).collect(),
        unit,
        images: records.len(),
    })
}

fn patch_block(record: &AttentionRecord, l: usize, h: usize, off: usize) -> Vec<f64> {
    let n = record.grid.0 * record.grid.1;
    let t = record.tokens();
    let a = record.map(l, h);
    (0..n)
        .flat_map(|q| a[(q + off) * t + off..(q + off) * t + off + n].iter().copied())
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per-layer mean cosine similarity over unordered head pairs of one
/// image, on the flattened patch blocks.
pub fn head_similarity(record: &AttentionRecord) -> Result<Vec<f64>> {
    let off = patch_offset(record)?;
    let heads = record.heads();
    if heads < 2 {
        return Err(invalid("head similarity needs at least two heads"));
    }
    let pairs = (heads * (heads - 1) / 2) as f64;
    Ok((0..record.layers())
        .map(|l| {
            let maps: Vec<Vec<f64>> = (0..heads).map(|h| patch_block(record, l, h, off)).collect();
            let mut sum = 0.0;
            for i in 0..heads {
                for j in i + 1..heads {
                    sum += cosine(&maps[i], &maps[j]);
                }
            }
            sum / pairs
        })
        .collect())
}

pub fn head_similarity_over(records: &[AttentionRecord]) -> Result<HeadSimilarityReport> {
    check_consistent(records)?;
    let mut acc = vec![0.0; records[0].layers()];
    for r in records {
        acc.iter_mut()
            .zip(head_similarity(r)?)
            .for_each(|(a, v)| *a += v);
    }
    let m = records.len() as f64;
    Ok(HeadSimilarityReport {
        per_layer: acc.into_iter().map(|v| v / m).collect(),
        images: records.len(),
    })
}

/// Attention averaged over heads and images for every layer, then
/// stripped of the CLS row and column.
pub fn average_attention_map(records: &[AttentionRecord]) -> Result<Vec<AvgAttentionMap>> {
    let off = check_consistent(records)?;
    let first = &records[0];
    let (t, n) = (first.tokens(), first.grid.0 * first.grid.1);
    let denom = (records.len() * first.heads()) as f64;
    (0..first.layers())
        .map(|l| {
            let mut full = vec![0.0; t * t];
            for r in records {
                for h in 0..r.heads() {
                    full.iter_mut().zip(r.map(l, h)).for_each(|(a, v)| *a += v);
                }
            }
            full.iter_mut().for_each(|v| *v /= denom);
            let map: Vec<f64> = (0..n)
                .flat_map(|q| full[(q + off) * t + off..(q + off) * t + off + n].to_vec())
                .collect();
            Ok(AvgAttentionMap {
                layer: l,
                grid: first.grid,
                full: Tensor::new(vec![t, t], full)?,
                map: Tensor::new(vec![n, n], map)?,
            })
        })
        .collect()
}

/// Diagonal-band mass and column concentration of a patch-patch map.
/// The band holds key patches within Chebyshev distance `band` of the
/// query on the grid.
pub fn pattern_scores(map: &Tensor, grid: (usize, usize), band: usize) -> Result<PatternScores> {
    let (h, w) = grid;
    let n = h * w;
    if n == 0 || map.shape() != [n, n] {
        return Err(shape_err(format!(
            "map {:?} is not a nonempty [{n}, {n}] patch map",
            map.shape()
        )));
    }
    let total: f64 = map.data().iter().sum();
    if !(total > 0.0) {
        return Err(invalid("attention map has no mass"));
    }
    let mut in_band = 0.0;
    let mut cols = vec![0.0; n];
    for q in 0..n {
        for k in 0..n {
            let v = map.data()[q * n + k];
            let cheb = (q / w).abs_diff(k / w).max((q % w).abs_diff(k % w));
            if cheb <= band {
                in_band += v;
            }
            cols[k] += v;
        }
    }
    let heaviest = cols.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(PatternScores {
        diagonality: in_band / total,
        column_concentration: n as f64 * heaviest / total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Record for one layer on a `g x g` grid with a CLS token; `f` gives
    /// the attention row of each token per head.
    fn record(g: usize, heads: usize, f: impl Fn(usize, usize) -> Vec<f64>) -> AttentionRecord {
        let t = g * g + 1;
        let mut data = Vec::new();
        for h in 0..heads {
            for q in 0..t {
                let row = f(h, q);
                assert_eq!(row.len(), t);
                data.extend(row);
            }
        }
        AttentionRecord {
            probs: Tensor::new(vec![1, heads, t, t], data).unwrap(),
            grid: (g, g),
            patch_size: 4,
        }
    }

    fn one_hot(t: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; t];
        v[k] = 1.0;
        v
    }

    #[test]
    fn distance_examples() {
        let ident = record(2, 2, |_, q| one_hot(5, q));
        assert_eq!(attention_distance(&ident).unwrap().distance, vec![0.0, 0.0]);

        let uniform = record(2, 1, |_, _| vec![0.2; 5]);
        let d = attention_distance(&uniform).unwrap().get(0, 0);
        assert!((d - (2.0 + 2f64.sqrt()) / 4.0).abs() < 1e-12);
        assert!((d - 0.853553).abs() < 1e-6);

        let far = record(2, 1, |_, q| if q == 0 { one_hot(5, 0) } else { one_hot(5, 1 + (3 - (q - 1))) });
        assert!((attention_distance(&far).unwrap().get(0, 0) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pixel_units_scale_by_patch() {
        let uniform = record(2, 1, |_, _| vec![0.2; 5]);
        let p = attention_distance_over(&[uniform.clone()], DistanceUnit::Patch).unwrap();
        let px = attention_distance_over(&[uniform], DistanceUnit::Pixel).unwrap();
        assert!((px.get(0, 0) - 4.0 * p.get(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn similarity_examples() {
        let same = record(2, 3, |_, q| one_hot(5, q));
        assert!((head_similarity(&same).unwrap()[0] - 1.0).abs() < 1e-12);

        let ortho = record(2, 2, |h, _| one_hot(5, 1 + h));
        assert_eq!(head_similarity(&ortho).unwrap()[0], 0.0);

        let mixed = record(2, 3, |h, _| one_hot(5, if h < 2 { 1 } else { 2 }));
        assert!((head_similarity(&mixed).unwrap()[0] - 1.0 / 3.0).abs() < 1e-12);

        let single = record(2, 1, |_, q| one_hot(5, q));
        assert!(head_similarity(&single).is_err());
    }

    #[test]
    fn average_map_examples() {
        let a = record(2, 1, |_, q| one_hot(5, q));
        let maps = average_attention_map(&[a.clone()]).unwrap();
        let eye: Vec<f64> = (0..16).map(|i| if i / 4 == i % 4 { 1.0 } else { 0.0 }).collect();
        assert_eq!(maps[0].map.data(), eye.as_slice());

        let u = record(2, 2, |_, _| vec![0.2; 5]);
        let maps = average_attention_map(&[u]).unwrap();
        assert!(maps[0].full.data().iter().all(|&v| v == 0.2));

        let b = record(2, 1, |_, _| one_hot(5, 1));
        let both = average_attention_map(&[a.clone(), b.clone()]).unwrap();
        let (ma, mb) = (&average_attention_map(&[a]).unwrap()[0].map, &average_attention_map(&[b]).unwrap()[0].map);
        for ((m, x), y) in both[0].map.data().iter().zip(ma.data()).zip(mb.data()) {
            assert_eq!(*m, (x + y) / 2.0);
        }
    }

    #[test]
    fn pattern_examples() {
        let eye = Tensor::new(vec![9, 9], (0..81).map(|i| if i / 9 == i % 9 { 1.0 } else { 0.0 }).collect()).unwrap();
        assert_eq!(pattern_scores(&eye, (3, 3), 1).unwrap().diagonality, 1.0);

        let uni = Tensor::full(&[9, 9], 1.0 / 9.0);
        let s = pattern_scores(&uni, (3, 3), 1).unwrap();
        assert!((s.column_concentration - 1.0).abs() < 1e-12);
        assert!(s.diagonality < 1.0);

        let uni2 = Tensor::full(&[4, 4], 0.25);
        assert!((pattern_scores(&uni2, (2, 2), 1).unwrap().diagonality - 1.0).abs() < 1e-12);

        let mut col = vec![0.0; 16];
        (0..4).for_each(|q| col[q * 4 + 2] = 1.0);
        let col = Tensor::new(vec![4, 4], col).unwrap();
        assert_eq!(pattern_scores(&col, (2, 2), 1).unwrap().column_concentration, 4.0);

        assert!(pattern_scores(&Tensor::zeros(&[0, 0]), (0, 0), 1).is_err());
        assert!(pattern_scores(&Tensor::zeros(&[4, 4]), (2, 2), 1).is_err());
    }

    #[test]
    fn records_without_cls_are_accepted() {
        let probs = Tensor::full(&[1, 1, 4, 4], 0.25);
        let r = AttentionRecord { probs, grid: (2, 2), patch_size: 1 };
        assert!((attention_distance(&r).unwrap().get(0, 0) - 0.853553).abs() < 1e-6);
        let bad = AttentionRecord { probs: Tensor::full(&[1, 1, 7, 7], 1.0 / 7.0), grid: (2, 2), patch_size: 1 };
        assert!(attention_distance(&bad).is_err());
    }
}
