#![allow(dead_code)]

use mari::numerics::kernels::Segments;
use mari::numerics::{Tape, Tensor, Var};
use mari::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ROWS: usize = 3;
pub const WIDTH: usize = 4;

/// A seeded random composition of tape ops over `ROWS × WIDTH` activations.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    pub params: Vec<Tensor>,
    ops: Vec<(u8, usize, usize, f64)>,
    readout: Tensor,
}

impl RandomGraph {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            Tensor::randn(&[ROWS, WIDTH], 1.0, &mut rng),
            Tensor::randn(&[ROWS, WIDTH], 1.0, &mut rng),
            Tensor::randn(&[WIDTH, WIDTH], 0.5, &mut rng),
            Tensor::randn(&[WIDTH], 1.0, &mut rng).map(|g| 1.0 + 0.3 * g),
            Tensor::randn(&[WIDTH], 0.3, &mut rng),
        ];
        let depth = rng.random_range(3..9);
        let ops = (0..depth)
            .map(|_| {
                (
                    rng.random_range(0..11u8),
                    rng.random_range(0..64),
                    rng.random_range(0..64),
                    rng.random_range(-1.5..1.5),
                )
            })
            .collect();
        RandomGraph {
            params,
            ops,
            readout: Tensor::randn(&[ROWS, WIDTH], 1.0, &mut rng),
        }
    }

    pub fn build(&self, t: &mut Tape, p: &[Var]) -> Result<Var> {
        let mut pool: Vec<Var> = vec![p[0], p[1]];
        let (w, g, b) = (p[2], p[3], p[4]);
        for &(op, i, j, c) in &self.ops {
            let x = pool[i % pool.len()];
            let y = pool[j % pool.len()];
            let v = match op {
                0 => t.matmul(x, w),
                1 => t.add(x, y),
                2 => t.mul(x, y),
                3 => t.gelu(x),
                4 => t.layer_norm(x, g, b),
                5 => t.softmax(x),
                6 => t.log_softmax(x),
                7 => t.add_row(x, b),
                8 => {
                    let qkv = t.concat_cols(&[x, y, x]);
                    t.attention(
                        qkv,
                        &Segments {
                            lens: vec![1, ROWS - 1],
                        },
                        2,
                    )
                }
                9 => {
                    let sq = t.mul(x, x);
                    let one = t.constant(Tensor::full(&[ROWS, WIDTH], 1.0));
                    let s = t.add(sq, one);
                    t.sqrt(s)
                }
                _ => t.scale(x, c),
            };
            pool.push(v);
        }
        let r = t.constant(self.readout.clone());
        let last = *pool.last().expect("non-empty pool");
        let m = t.mul(last, r);
        let s = t.sum(m);
        let q = t.sum_sq(last);
        let q = t.scale(q, 0.1);
        Ok(t.add(s, q))
    }
}
pub mod oracles;
