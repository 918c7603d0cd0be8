use super::{restore_params, save_with_sidecar, Architecture, Encoder, Sidecar};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, ParamStore, Parameterized, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    /// 1 or 2 stacked bidirectional layers.
    pub layers: usize,
    pub output_dim: usize,
    pub max_len: usize,
    /// Weights start uniform in `[-init_scale, init_scale]`; biases start at zero.
    pub init_scale: f64,
}

impl GruConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.layers) {
            return Err(Error::Config(format!(
                "BiGRU supports 1 or 2 layers, got {}",
                self.layers
            )));
        }
        if [
            self.vocab_size,
            self.embed_dim,
            self.hidden,
            self.output_dim,
            self.max_len,
        ]
        .contains(&0)
        {
            return Err(Error::Config("BiGRU dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter ids of one GRU cell: input weights `d x h`, recurrent weights
/// `h x h` and bias rows for the reset gate, update gate and candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruCell {
    pub w_xr: ParamId,
    pub w_xz: ParamId,
    pub w_xh: ParamId,
    pub w_hr: ParamId,
    pub w_hz: ParamId,
    pub w_hh: ParamId,
    pub b_r: ParamId,
    pub b_z: ParamId,
    pub b_h: ParamId,
}

impl GruCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        scale: f64,
        rng: &mut rng::Rng,
    ) -> Self {
        let mut w = |name: &str, rows: usize, cols: usize| {
            store.add(
                format!("{prefix}.{name}"),
                Tensor::uniform(&[rows, cols], -scale, scale, rng),
            )
        };
        let (w_xr, w_xz, w_xh) = (
            w("w_xr", input, hidden),
            w("w_xz", input, hidden),
            w("w_xh", input, hidden),
        );
        let (w_hr, w_hz, w_hh) = (
            w("w_hr", hidden, hidden),
            w("w_hz", hidden, hidden),
            w("w_hh", hidden, hidden),
        );
        let mut b = |name: &str| store.add(format!("{prefix}.{name}"), Tensor::zeros(&[1, hidden]));
        let (b_r, b_z, b_h) = (b("b_r"), b("b_z"), b("b_h"));
        Self {
            w_xr,
            w_xz,
            w_xh,
            w_hr,
            w_hz,
            w_hh,
            b_r,
            b_z,
            b_h,
        }
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.w_xr, self.w_xz, self.w_xh, self.w_hr, self.w_hz, self.w_hh, self.b_r, self.b_z,
            self.b_h,
        ]
    }

    pub fn bind<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
    ) -> BoundGruCell<'g, T> {
        let p = |id| g.param(store, id);
        BoundGruCell {
            w_xr: p(self.w_xr),
            w_xz: p(self.w_xz),
            w_xh: p(self.w_xh),
            w_hr: p(self.w_hr),
            w_hz: p(self.w_hz),
            w_hh: p(self.w_hh),
            b_r: p(self.b_r),
            b_z: p(self.b_z),
            b_h: p(self.b_h),
        }
    }
}

/// A GRU cell whose parameters are recorded on a graph.
#[derive(Clone, Copy)]
pub struct BoundGruCell<'g, T: Scalar> {
    pub w_xr: Var<'g, T>,
    pub w_xz: Var<'g, T>,
    pub w_xh: Var<'g, T>,
    pub w_hr: Var<'g, T>,
    pub w_hz: Var<'g, T>,
    pub w_hh: Var<'g, T>,
    pub b_r: Var<'g, T>,
    pub b_z: Var<'g, T>,
    pub b_h: Var<'g, T>,
}

impl<'g, T: Scalar> BoundGruCell<'g, T> {
    /// One step given the input projections `x W_xr`, `x W_xz`, `x W_xh`.
    fn step_projected(
        &self,
        xr: Var<'g, T>,
        xz: Var<'g, T>,
        xh: Var<'g, T>,
        h_prev: Var<'g, T>,
    ) -> Var<'g, T> {
        let r = xr
            .add(&h_prev.matmul(&self.w_hr))
            .add_row(&self.b_r)
            .sigmoid();
        let z = xz
            .add(&h_prev.matmul(&self.w_hz))
            .add_row(&self.b_z)
            .sigmoid();
        let candidate = xh
            .add(&r.mul(&h_prev).matmul(&self.w_hh))
            .add_row(&self.b_h)
            .tanh();
        // The update gate weighs the previous state.
        z.mul(&h_prev).add(&z.one_minus().mul(&candidate))
    }
}

/// `H_t` from `X_t: [n, d]` and `H_{t-1}: [n, h]`.
pub fn gru_cell_step<'g, T: Scalar>(
    cell: &BoundGruCell<'g, T>,
    x: Var<'g, T>,
    h_prev: Var<'g, T>,
) -> Var<'g, T> {
    cell.step_projected(
        x.matmul(&cell.w_xr),
        x.matmul(&cell.w_xz),
        x.matmul(&cell.w_xh),
        h_prev,
    )
}

/// Time-major layout of a ragged batch: row `t * n + i` holds step `t` of item `i`.
struct Layout {
    n: usize,
    steps: usize,
    lens: Vec<usize>,
}

impl Layout {
    fn active(&self, t: usize, i: usize) -> bool {
        t < self.lens[i]
    }

    /// Row map that reverses each item's valid prefix and leaves padding in place.
    fn reversal(&self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.steps * self.n);
        for t in 0..self.steps {
            for i in 0..self.n {
                let src = if self.active(t, i) {
                    self.lens[i] - 1 - t
                } else {
                    t
                };
                idx.push(src * self.n + i);
            }
        }
        idx
    }

    /// Per-step `[n, h]` keep masks, `None` when every item is still active.
    fn step_masks<T: Scalar>(&self, hidden: usize) -> Vec<Option<Vec<T>>> {
        (0..self.steps)
            .map(|t| {
                if (0..self.n).all(|i| self.active(t, i)) {
                    return None;
                }
                let mut m = Vec::with_capacity(self.n * hidden);
                for i in 0..self.n {
                    let v = if self.active(t, i) {
                        T::one()
                    } else {
                        T::zero()
                    };
                    m.extend(std::iter::repeat_n(v, hidden));
                }
                Some(m)
            })
            .collect()
    }
}

/// Run one direction over a time-major sequence; padded steps keep the state.
fn run_direction<'g, T: Scalar>(
    cell: &BoundGruCell<'g, T>,
    xs: Var<'g, T>,
    layout: &Layout,
    masks: &[Option<Vec<T>>],
    hidden: usize,
) -> (Vec<Var<'g, T>>, Var<'g, T>) {
    let g = xs.graph();
    let n = layout.n;
    let (xr, xz, xh) = (
        xs.matmul(&cell.w_xr),
        xs.matmul(&cell.w_xz),
        xs.matmul(&cell.w_xh),
    );
    let mut h = g.constant(&[n, hidden], vec![T::zero(); n * hidden]);
    let mut states = Vec::with_capacity(layout.steps);
    for (t, mask) in masks.iter().enumerate() {
        let rows = |v: &Var<'g, T>| v.narrow_rows(t * n, n);
        let next = cell.step_projected(rows(&xr), rows(&xz), rows(&xh), h);
        h = match mask {
            None => next,
            Some(m) => h.add(&next.sub(&h).mul(&g.constant(&[n, hidden], m.clone()))),
        };
        states.push(h);
    }
    (states, h)
}

/// Bidirectional GRU encoder: the last forward and backward states of the
/// top layer are concatenated and passed through a dense layer.
#[derive(Clone, Debug)]
pub struct BiGruEncoder<T: Scalar> {
    config: GruConfig,
    store: ParamStore<T>,
    embedding: ParamId,
    layers: Vec<(GruCell, GruCell)>,
    dense_w: ParamId,
    dense_b: ParamId,
}

impl<T: Scalar> BiGruEncoder<T> {
    pub fn new(config: GruConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stage_rng(seed, "bigru-init");
        let s = config.init_scale;
        let mut store = ParamStore::new();
        let embedding = store.add(
            "embedding",
            Tensor::uniform(&[config.vocab_size, config.embed_dim], -s, s, &mut rng),
        );
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let input = if l == 0 {
                config.embed_dim
            } else {
                2 * config.hidden
            };
            let f = GruCell::new(
                &mut store,
                &format!("l{l}.fwd"),
                input,
                config.hidden,
                s,
                &mut rng,
            );
            let b = GruCell::new(
                &mut store,
                &format!("l{l}.bwd"),
                input,
                config.hidden,
                s,
                &mut rng,
            );
            layers.push((f, b));
        }
        let dense_w = store.add(
            "dense.w",
            Tensor::uniform(&[2 * config.hidden, config.output_dim], -s, s, &mut rng),
        );
        let dense_b = store.add("dense.b", Tensor::zeros(&[1, config.output_dim]));
        Ok(Self {
            config,
            store,
            embedding,
            layers,
            dense_w,
            dense_b,
        })
    }

    pub fn config(&self) -> &GruConfig {
        &self.config
    }

    /// `(forward, backward)` cells per layer.
    pub fn cells(&self) -> &[(GruCell, GruCell)] {
        &self.layers
    }

    /// Concatenated last forward and backward states of the top layer, `[n, 2h]`.
    pub fn final_states<'g>(&self, g: &'g Graph<T>, batch: &[Vec<u32>]) -> Result<Var<'g, T>> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let lens: Vec<usize> = batch
            .iter()
            .map(|s| s.len().min(self.config.max_len))
            .collect();
        if let Some(i) = lens.iter().position(|&l| l == 0) {
            return Err(Error::Contract(format!(
                "sequence {i} of the batch is empty"
            )));
        }
        let layout = Layout {
            n: batch.len(),
            steps: *lens.iter().max().expect("non-empty"),
            lens,
        };
        let mut ids = Vec::with_capacity(layout.steps * layout.n);
        for t in 0..layout.steps {
            for (i, seq) in batch.iter().enumerate() {
                let id = if layout.active(t, i) {
                    seq[t] as usize
                } else {
                    0
                };
                if id >= self.config.vocab_size {
                    return Err(Error::Contract(format!(
                        "token id {id} outside vocabulary of {}",
                        self.config.vocab_size
                    )));
                }
                ids.push(id);
            }
        }
        let h = self.config.hidden;
        let masks = layout.step_masks::<T>(h);
        let reversal = layout.reversal();
        let mut xs = g.param(&self.store, self.embedding).gather_rows(&ids);
        let mut finals = None;
        for (l, (fc, bc)) in self.layers.iter().enumerate() {
            let (fwd, bwd) = (fc.bind(g, &self.store), bc.bind(g, &self.store));
            let (f_states, f_last) = run_direction(&fwd, xs, &layout, &masks, h);
            let (b_states, b_last) =
                run_direction(&bwd, xs.gather_rows(&reversal), &layout, &masks, h);
            finals = Some(g.concat(&[f_last, b_last], 1));
            if l + 1 < self.layers.len() {
                let f_seq = g.concat(&f_states, 0);
                let b_seq = g.concat(&b_states, 0).gather_rows(&reversal);
                xs = g.concat(&[f_seq, b_seq], 1);
            }
        }
        Ok(finals.expect("at least one layer"))
    }

    pub fn save(&self, path: &Path, tokenizer_hash: &str, seed: u64) -> Result<()> {
        let sidecar = Sidecar {
            architecture: Architecture::Bigru(self.config.clone()),
            tokenizer_hash: tokenizer_hash.to_string(),
            seed,
        };
        save_with_sidecar(&self.store, &sidecar, path)
    }

    pub fn load_weights(config: GruConfig, path: &Path) -> Result<Self> {
        let mut enc = Self::new(config, 0)?;
        restore_params(&mut enc.store, path)?;
        Ok(enc)
    }
}

impl<T: Scalar> Parameterized<T> for BiGruEncoder<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
}

impl<T: Scalar> Encoder<T> for BiGruEncoder<T> {
    fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    fn encode_batch<'g>(&self, g: &'g Graph<T>, batch: &[Vec<u32>]) -> Result<Var<'g, T>> {
        let states = self.final_states(g, batch)?;
        Ok(states
            .matmul(&g.param(&self.store, self.dense_w))
            .add_row(&g.param(&self.store, self.dense_b)))
    }
}
