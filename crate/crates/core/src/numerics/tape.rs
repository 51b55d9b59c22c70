use super::kernels::{self, Aux, Kernel};
use super::tensor::Tensor;
use crate::error::{contract, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    kernel: Option<Kernel>,
    inputs: Vec<Var>,
    aux: Aux,
    needs_grad: bool,
}

/// Computation record for reverse-mode differentiation.
///
/// Values are appended in evaluation order, so the record is acyclic by
/// construction and a reverse sweep visits every consumer before its
/// producers. Fan-out is handled by accumulating gradients.
///
/// An untracked tape evaluates kernels the same way but keeps no kernel
/// history, so `backward` on it is rejected.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    tracking: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), tracking: true }
    }

    pub fn untracked() -> Self {
        Self { nodes: Vec::new(), tracking: false }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, kernel: Option<Kernel>, inputs: Vec<Var>, aux: Aux, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, kernel, inputs, aux, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        value.check_finite("leaf")?;
        let g = self.tracking;
        Ok(self.push(value, None, Vec::new(), Aux::None, g))
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        value.check_finite("constant")?;
        Ok(self.push(value, None, Vec::new(), Aux::None, false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    /// Zero-row flags of an `L2NormalizeRows` result.
    pub fn zero_rows(&self, v: Var) -> Option<&[bool]> {
        match &self.nodes[v.0].aux {
            Aux::L2 { zero_rows, .. } => Some(zero_rows),
            _ => None,
        }
    }

    pub fn run(&mut self, kernel: Kernel, inputs: &[Var]) -> Result<Var> {
        let (out, aux) = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            kernels::forward(&kernel, &vals)?
        };
        let needs_grad = self.tracking && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        if needs_grad {
            Ok(self.push(out, Some(kernel), inputs.to_vec(), aux, true))
        } else {
            Ok(self.push(out, None, Vec::new(), Aux::None, false))
        }
    }

    /// Reverse sweep from a scalar loss. Afterwards every tracked leaf holds
    /// its gradient in `Tensor::grad` (zeros when the loss does not depend on
    /// it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.tracking {
            contract!("backward on an untracked tape");
        }
        if self.nodes[loss.0].value.len() != 1 {
            contract!("backward needs a scalar loss, got shape {:?}", self.nodes[loss.0].value.shape());
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.kernel {
                None => {
                    if node.needs_grad {
                        self.nodes[i].value.grad = Some(g);
                    }
                }
                Some(kernel) => {
                    let vals: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let gin = kernels::backward(kernel, &vals, &node.value, &node.aux, &g);
                    for (inp, gi) in node.inputs.iter().zip(gin) {
                        let Some(gi) = gi else { continue };
                        if !self.nodes[inp.0].needs_grad {
                            continue;
                        }
                        match &mut grads[inp.0] {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                            slot => *slot = Some(gi),
                        }
                    }
                }
            }
        }
        for node in &mut self.nodes[..n] {
            if node.kernel.is_none() && node.needs_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    // -- convenience wrappers -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.run(Kernel::MatMul, &[a, b])
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.run(Kernel::MatMulNT, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.run(Kernel::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.run(Kernel::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.run(Kernel::Mul, &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.run(Kernel::AddRow, &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.run(Kernel::Scale(s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.run(Kernel::Gelu, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        self.run(Kernel::SoftmaxRows { temperature }, &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        self.run(Kernel::LogSoftmaxRows { temperature }, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.run(Kernel::LayerNormRows { eps: 1e-5 }, &[x, gain, bias])
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.run(Kernel::L2NormalizeRows, &[a])
    }

    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        self.run(Kernel::SelectRows { rows }, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.run(Kernel::SliceCols { start, len }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.run(Kernel::ConcatRows, parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.run(Kernel::ConcatCols, parts)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.run(Kernel::SumAll, &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.run(Kernel::MeanAll, &[a])
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.run(Kernel::SumRows, &[a])
    }

    pub fn segment_attention(&mut self, q: Var, k: Var, v: Var, segments: Vec<(usize, usize)>, heads: usize) -> Result<Var> {
        self.run(Kernel::SegmentAttention { segments, heads }, &[q, k, v])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.run(Kernel::Transpose, &[a])
    }
}

/// Applies a kernel outside any tape.
pub fn run_kernel(kernel: &Kernel, inputs: &[&Tensor]) -> Result<Tensor> {
    kernels::forward(kernel, inputs).map(|(t, _)| t)
}
