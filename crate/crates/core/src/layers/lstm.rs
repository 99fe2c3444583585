//! Long short-term memory layer over a `[T, D]` sequence, returning the final
//! hidden state.

use super::{sigmoid, LayerParams, GATE_NAMES as GATES};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, SeededRng, Tensor};

/// Hidden/cell pair carried between timesteps.
#[derive(Debug, Clone)]
pub struct LstmState<T> {
    pub hidden: Tensor<T>,
    pub cell: Tensor<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(units: usize) -> Self {
        Self {
            hidden: Tensor::zeros(&[units]),
            cell: Tensor::zeros(&[units]),
        }
    }
}

#[derive(Debug, Clone)]
struct StepCache<T> {
    h_prev: Vec<T>,
    c_prev: Vec<T>,
    /// Post-activation gates, in [`GATES`] order: input, forget, cell, output.
    gates: [Vec<T>; 4],
    tanh_cell: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct LstmCtx<T> {
    input: Tensor<T>,
    steps: Vec<StepCache<T>>,
}

#[derive(Debug, Clone)]
pub struct Lstm<T> {
    pub name: String,
    pub params: LayerParams<T>,
    input_dim: usize,
    units: usize,
}

impl<T: Scalar> Lstm<T> {
    /// The forget-gate bias starts at one so early training does not erase the
    /// cell state.
    pub fn new(name: &str, input_dim: usize, units: usize, rng: &mut SeededRng) -> Self {
        let mut params = LayerParams::new();
        for gate in GATES {
            params
                .insert(
                    &format!("kernel_{gate}"),
                    rng.glorot_uniform(&[input_dim, units], input_dim, units),
                )
                .expect("fresh params");
            params
                .insert(
                    &format!("recurrent_{gate}"),
                    rng.glorot_uniform(&[units, units], units, units),
                )
                .expect("fresh params");
            let bias = if gate == "forget" {
                Tensor::filled(&[units], T::one())
            } else {
                Tensor::zeros(&[units])
            };
            params
                .insert(&format!("bias_{gate}"), bias)
                .expect("fresh params");
        }
        Self {
            name: name.to_string(),
            params,
            input_dim,
            units,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn units(&self) -> usize {
        self.units
    }

    /// Runs the recurrence over `seq` of shape `[T, D]` and returns the final
    /// hidden state of shape `[units]`.
    pub fn forward(&self, seq: &Tensor<T>) -> Result<(Tensor<T>, LstmCtx<T>)> {
        if seq.rank() != 2 || seq.shape()[1] != self.input_dim {
            return Err(Error::Dimension(format!(
                "lstm {} expects [steps, {}] input, got {:?}",
                self.name,
                self.input_dim,
                seq.shape()
            )));
        }
        let steps = seq.shape()[0];
        let units = self.units;
        let mut state = LstmState::zeros(units);
        let mut caches = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = &seq.data()[t * self.input_dim..(t + 1) * self.input_dim];
            let h_prev = state.hidden.data().to_vec();
            let c_prev = state.cell.data().to_vec();
            let mut gates: [Vec<T>; 4] = Default::default();
            for (gi, gate) in GATES.iter().enumerate() {
                let mut pre = self.params.value(&format!("bias_{gate}")).data().to_vec();
                accumulate_affine(
                    &mut pre,
                    x,
                    self.params.value(&format!("kernel_{gate}")).data(),
                );
                accumulate_affine(
                    &mut pre,
                    &h_prev,
                    self.params.value(&format!("recurrent_{gate}")).data(),
                );
                let activated: Vec<T> = if *gate == "cell" {
                    pre.iter().map(|v| v.tanh()).collect()
                } else {
                    pre.iter().map(|&v| sigmoid(v)).collect()
                };
                gates[gi] = activated;
            }
            let mut tanh_cell = vec![T::zero(); units];
            for u in 0..units {
                let c = gates[1][u] * c_prev[u] + gates[0][u] * gates[2][u];
                state.cell.data_mut()[u] = c;
                tanh_cell[u] = c.tanh();
                state.hidden.data_mut()[u] = gates[3][u] * tanh_cell[u];
            }
            caches.push(StepCache {
                h_prev,
                c_prev,
                gates,
                tanh_cell,
            });
        }
        Ok((
            state.hidden,
            LstmCtx {
                input: seq.clone(),
                steps: caches,
            },
        ))
    }

    /// Backpropagates through every timestep. `upstream` is the gradient with
    /// respect to the final hidden state; the return value is the gradient
    /// with respect to the input sequence. Parameter gradients accumulate.
    pub fn backward(&mut self, ctx: &LstmCtx<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        if upstream.shape() != [self.units] {
            return Err(Error::Dimension(format!(
                "lstm {} expects [{}] upstream gradient, got {:?}",
                self.name,
                self.units,
                upstream.shape()
            )));
        }
        let units = self.units;
        let din = self.input_dim;
        let steps = ctx.steps.len();
        let mut grad_seq = Tensor::zeros(ctx.input.shape());
        let mut grad_kernel: Vec<Tensor<T>> =
            GATES.iter().map(|_| Tensor::zeros(&[din, units])).collect();
        let mut grad_recurrent: Vec<Tensor<T>> = GATES
            .iter()
            .map(|_| Tensor::zeros(&[units, units]))
            .collect();
        let mut grad_bias: Vec<Tensor<T>> = GATES.iter().map(|_| Tensor::zeros(&[units])).collect();

        let mut dh = upstream.data().to_vec();
        let mut dc = vec![T::zero(); units];
        for t in (0..steps).rev() {
            let cache = &ctx.steps[t];
            let x = &ctx.input.data()[t * din..(t + 1) * din];
            let (i, f, g, o) = (
                &cache.gates[0],
                &cache.gates[1],
                &cache.gates[2],
                &cache.gates[3],
            );
            let one = T::one();
            // Pre-activation gradients, in GATES order.
            let mut dpre: [Vec<T>; 4] = Default::default();
            for row in dpre.iter_mut() {
                *row = vec![T::zero(); units];
            }
            for u in 0..units {
                let tc = cache.tanh_cell[u];
                let dcell = dc[u] + dh[u] * o[u] * (one - tc * tc);
                dpre[3][u] = dh[u] * tc * o[u] * (one - o[u]);
                dpre[0][u] = dcell * g[u] * i[u] * (one - i[u]);
                dpre[1][u] = dcell * cache.c_prev[u] * f[u] * (one - f[u]);
                dpre[2][u] = dcell * i[u] * (one - g[u] * g[u]);
                dc[u] = dcell * f[u];
            }
            let mut dh_prev = vec![T::zero(); units];
            let dx = &mut grad_seq.data_mut()[t * din..(t + 1) * din];
            for gi in 0..4 {
                let kernel = self.params.value(&format!("kernel_{}", GATES[gi])).data();
                let recurrent = self
                    .params
                    .value(&format!("recurrent_{}", GATES[gi]))
                    .data();
                let gk = grad_kernel[gi].data_mut();
                let gr = grad_recurrent[gi].data_mut();
                let gb = grad_bias[gi].data_mut();
                for u in 0..units {
                    gb[u] = gb[u] + dpre[gi][u];
                }
                for d in 0..din {
                    let xv = x[d];
                    let row = &kernel[d * units..(d + 1) * units];
                    let grow = &mut gk[d * units..(d + 1) * units];
                    let mut acc = T::zero();
                    for u in 0..units {
                        acc = acc + dpre[gi][u] * row[u];
                        grow[u] = grow[u] + xv * dpre[gi][u];
                    }
                    dx[d] = dx[d] + acc;
                }
                for v in 0..units {
                    let hv = cache.h_prev[v];
                    let row = &recurrent[v * units..(v + 1) * units];
                    let grow = &mut gr[v * units..(v + 1) * units];
                    let mut acc = T::zero();
                    for u in 0..units {
                        acc = acc + dpre[gi][u] * row[u];
                        grow[u] = grow[u] + hv * dpre[gi][u];
                    }
                    dh_prev[v] = dh_prev[v] + acc;
                }
            }
            dh = dh_prev;
        }
        for gi in 0..4 {
            self.params
                .accumulate(&format!("kernel_{}", GATES[gi]), &grad_kernel[gi]);
            self.params
                .accumulate(&format!("recurrent_{}", GATES[gi]), &grad_recurrent[gi]);
            self.params
                .accumulate(&format!("bias_{}", GATES[gi]), &grad_bias[gi]);
        }
        Ok(grad_seq)
    }
}

/// `pre[u] += sum_d x[d] * w[d, u]` for a row-major `[len(x), len(pre)]` matrix.
fn accumulate_affine<T: Scalar>(pre: &mut [T], x: &[T], w: &[T]) {
    let units = pre.len();
    for (d, &xv) in x.iter().enumerate() {
        if xv == T::zero() {
            continue;
        }
        let row = &w[d * units..(d + 1) * units];
        for u in 0..units {
            pre[u] = pre[u] + xv * row[u];
        }
    }
}
