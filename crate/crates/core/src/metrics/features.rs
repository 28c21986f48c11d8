//! Featurizers for set-level metrics: simple, declared embeddings standing in
//! for pretrained feature networks. Distances computed on them are only
//! comparable within a run.

use serde::{Deserialize, Serialize};

use crate::field::Field;
use crate::rng::Stream;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Featurizer {
    /// Block-average the image to `grid x grid` and flatten.
    DownsampleFlatten { grid: usize },
    /// Project the flattened image with a seeded Gaussian matrix.
    RandomProjection { dim: usize, seed: u64 },
}

impl Featurizer {
    pub fn id(&self) -> String {
        match self {
            Featurizer::DownsampleFlatten { grid } => format!("downsample-flatten({grid})"),
            Featurizer::RandomProjection { dim, seed } => {
                format!("random-projection(dim={dim},seed={seed})")
            }
        }
    }
}

/// N x d feature matrix with provenance.
#[derive(Clone, Debug)]
pub struct FeatureEmbedding {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
    pub featurizer: String,
}

fn block_average(f: &Field, grid: usize) -> Vec<f64> {
    let (h, w) = (f.height(), f.width());
    let mut out = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        let y0 = gy * h / grid;
        let y1 = ((gy + 1) * h / grid).max(y0 + 1);
        for gx in 0..grid {
            let x0 = gx * w / grid;
            let x1 = ((gx + 1) * w / grid).max(x0 + 1);
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += f.get(y, x);
                }
            }
            out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    out
}

/// Embeds a set of equally shaped fields.
pub fn embed_fields(fields: &[Field], featurizer: Featurizer) -> Result<FeatureEmbedding> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidRange("cannot embed an empty set".into()))?;
    for f in fields {
        if !f.same_shape(first) {
            return Err(Error::ShapeMismatch(
                first.height(),
                first.width(),
                f.height(),
                f.width(),
            ));
        }
    }
    match featurizer {
        Featurizer::DownsampleFlatten { grid } => {
            if grid == 0 || grid > first.height().min(first.width()) {
                return Err(Error::InvalidRange(format!("bad downsample grid {grid}")));
            }
            let vectors: Vec<Vec<f64>> = fields.iter().map(|f| block_average(f, grid)).collect();
            Ok(FeatureEmbedding {
                dim: grid * grid,
                vectors,
                featurizer: featurizer.id(),
            })
        }
        Featurizer::RandomProjection { dim, seed } => {
            if dim == 0 {
                return Err(Error::InvalidRange("projection dim must be > 0".into()));
            }
            let n = first.len();
            let scale = 1.0 / (n as f64).sqrt();
            // One substream per output dimension; regenerated rows beat
            // storing a dim x n matrix for the sizes used here.
            let base = Stream::new(seed);
            let rows: Vec<Vec<f64>> = (0..dim)
                .map(|d| {
                    let mut rng = base.substream(d as u64);
                    (0..n).map(|_| rng.next_gaussian() * scale).collect()
                })
                .collect();
            let vectors: Vec<Vec<f64>> = fields
                .iter()
                .map(|f| {
                    rows.iter()
                        .map(|row| {
                            row.iter()
                                .zip(f.data())
                                .map(|(r, v)| r * v)
                                .sum::<f64>()
                        })
                        .collect()
                })
                .collect();
            Ok(FeatureEmbedding {
                dim,
                vectors,
                featurizer: featurizer.id(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_dims_and_average() {
        let f = Field::from_fn(8, 8, |y, x| if y < 4 && x < 4 { 1.0 } else { 0.0 });
        let e = embed_fields(&[f], Featurizer::DownsampleFlatten { grid: 2 }).unwrap();
        assert_eq!(e.dim, 4);
        assert_eq!(e.vectors[0], vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn random_projection_deterministic_under_seed() {
        let mut rng = Stream::new(3);
        let fields: Vec<Field> = (0..3).map(|_| Field::gaussian(12, 12, &mut rng)).collect();
        let a = embed_fields(&fields, Featurizer::RandomProjection { dim: 6, seed: 42 }).unwrap();
        let b = embed_fields(&fields, Featurizer::RandomProjection { dim: 6, seed: 42 }).unwrap();
        assert_eq!(a.vectors, b.vectors);
        let c = embed_fields(&fields, Featurizer::RandomProjection { dim: 6, seed: 43 }).unwrap();
        assert_ne!(a.vectors, c.vectors);
    }

    #[test]
    fn rejects_mixed_shapes_and_empty() {
        assert!(embed_fields(&[], Featurizer::DownsampleFlatten { grid: 2 }).is_err());
        let fields = vec![Field::zeros(8, 8), Field::zeros(9, 8)];
        assert!(embed_fields(&fields, Featurizer::DownsampleFlatten { grid: 2 }).is_err());
    }
}
