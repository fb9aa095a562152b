use rand::Rng;

use super::render::DepthImage;
use crate::backbone::Linear;
use crate::error::{shape_err, Result};
use crate::tensor::{Graph, ParamStore, Var};

/// Stack of 3×3 stride-2 convolutions (padding 1, GELU) followed by global
/// average pooling. Convolutions run as a row gather (im2col) plus a matmul.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub convs: Vec<Linear>,
    pub channels: Vec<usize>,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: &[usize], rng: &mut R) -> Result<Self> {
        let mut convs = Vec::with_capacity(channels.len());
        let mut cin = 1;
        for (i, &cout) in channels.iter().enumerate() {
            convs.push(Linear::new(store, &format!("{name}.conv{i}"), 9 * cin, cout, true, rng)?);
            cin = cout;
        }
        Ok(Self {
            convs,
            channels: channels.to_vec(),
        })
    }

    pub fn out_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&1)
    }

    /// Returns a `1 × out_dim` feature row.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, img: &DepthImage) -> Result<Var> {
        if img.data.len() != img.height * img.width {
            return Err(shape_err!("image {}x{} with {} values", img.height, img.width, img.data.len()));
        }
        let (mut h, mut w, mut c) = (img.height, img.width, 1);
        let mut x = g.constant(&[h * w, 1], img.data.clone())?;
        for conv in &self.convs {
            let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
            let pad = g.zeros(&[1, c])?;
            let padded = g.concat(&[x, pad], 0)?;
            let zero_row = h * w;
            let mut index = Vec::with_capacity(ho * wo * 9);
            for oy in 0..ho {
                for ox in 0..wo {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (2 * oy + ky) as isize - 1;
                            let ix = (2 * ox + kx) as isize - 1;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                            index.push(if inside { iy as usize * w + ix as usize } else { zero_row });
                        }
                    }
                }
            }
            let cols = g.gather_rows(padded, &index)?;
            let cols = g.reshape(cols, &[ho * wo, 9 * c])?;
            let y = conv.forward(g, store, cols)?;
            x = g.gelu(y)?;
            h = ho;
            w = wo;
            c = g.shape(x)[1];
        }
        let pooled = g.mean_over_axis(x, 0)?;
        g.reshape(pooled, &[1, c])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution, independent of the gather path.
    fn conv_oracle(x: &[f64], h: usize, w: usize, cin: usize, wt: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut s = b[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (2 * oy + ky) as isize - 1;
                            let ix = (2 * ox + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                continue;
                            }
                            for ci in 0..cin {
                                let xin = x[(iy as usize * w + ix as usize) * cin + ci];
                                s += xin * wt[((ky * 3 + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    let t = (0.797_884_560_802_865_4 * (s + 0.044_715 * s * s * s)).tanh();
                    out[(oy * wo + ox) * cout + co] = 0.5 * s * (1.0 + t);
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = ImageEncoder::new(&mut store, "f2d", &[3, 2], &mut rng).unwrap();
        for conv in &enc.convs {
            let b = conv.b.unwrap();
            for v in store.get_mut(b).data.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let img = DepthImage {
            height: 9,
            width: 8,
            data: (0..72).map(|_| rng.random_range(0.0..1.0)).collect(),
        };
        let mut g = Graph::inference();
        let y = enc.forward(&mut g, &store, &img).unwrap();

        let mut x = img.data.clone();
        let (mut h, mut w, mut c) = (9, 8, 1);
        for conv in &enc.convs {
            let cout = store.get(conv.w).shape[1];
            x = conv_oracle(&x, h, w, c, &store.get(conv.w).data, &store.get(conv.b.unwrap()).data, cout);
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            c = cout;
        }
        let mut mean = vec![0.0; c];
        for px in x.chunks(c) {
            for (m, v) in mean.iter_mut().zip(px) {
                *m += v / (h * w) as f64;
            }
        }
        for (a, b) in g.value(y).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
