//! Comparing and coupling the image and text gradient directions through
//! fixed random projections into a common space.

use crate::numerics::RngStream;

#[derive(Debug, Clone)]
pub struct CrossModalProjector {
    common_dim: usize,
    image_dim: usize,
    text_dim: usize,
    /// `common_dim x image_dim`
    u: Vec<f64>,
    /// `common_dim x text_dim`
    v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// `1 - cos(U g_v, V g_t)`, in `[0, 2]`.
    pub r_hat: f64,
    pub coupled_v: Vec<f64>,
    pub coupled_t: Vec<f64>,
}

fn normalized(x: &[f64]) -> Option<Vec<f64>> {
    let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    (n > 0.0 && n.is_finite()).then(|| x.iter().map(|a| a / n).collect())
}

impl CrossModalProjector {
    /// Entries of `U` and `V` are `N(0, 1/common_dim)`.
    pub fn new(seed: u64, common_dim: usize, image_dim: usize, text_dim: usize) -> Self {
        let scale = 1.0 / (common_dim as f64).sqrt();
        let draw = |label: &str, n: usize| {
            let mut rng = RngStream::new(seed, format!("projection/{label}"));
            (0..n).map(|_| scale * rng.normal()).collect::<Vec<f64>>()
        };
        Self {
            common_dim,
            image_dim,
            text_dim,
            u: draw("image", common_dim * image_dim),
            v: draw("text", common_dim * text_dim),
        }
    }

    pub fn common_dim(&self) -> usize {
        self.common_dim
    }

    fn forward(m: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
        m.chunks_exact(cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn backward(m: &[f64], cols: usize, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; cols];
        for (row, &yr) in m.chunks_exact(cols).zip(y) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yr;
            }
        }
        out
    }

    pub fn project_image(&self, g_v: &[f64]) -> Vec<f64> {
        assert_eq!(g_v.len(), self.image_dim, "image gradient dimension");
        Self::forward(&self.u, self.image_dim, g_v)
    }

    pub fn project_text(&self, g_t: &[f64]) -> Vec<f64> {
        assert_eq!(g_t.len(), self.text_dim, "text gradient dimension");
        Self::forward(&self.v, self.text_dim, g_t)
    }

    /// Alignment score and the coupling directions. Degenerate (zero)
    /// gradients give `r_hat = 0` and zero couplings.
    pub fn align(&self, g_v: &[f64], g_t: &[f64]) -> Alignment {
        let (pu, pv) = (self.project_image(g_v), self.project_text(g_t));
        match (normalized(&pu), normalized(&pv)) {
            (Some(a), Some(b)) => {
                let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                Alignment {
                    r_hat: (1.0 - cos).clamp(0.0, 2.0),
                    coupled_v: Self::backward(&self.u, self.image_dim, &b),
                    coupled_t: Self::backward(&self.v, self.text_dim, &a),
                }
            }
            _ => Alignment {
                r_hat: 0.0,
                coupled_v: vec![0.0; self.image_dim],
                coupled_t: vec![0.0; self.text_dim],
            },
        }
    }
}
