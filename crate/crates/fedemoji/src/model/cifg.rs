//! Single step of the coupled input-forget gate recurrent cell.

use super::CifgLayer;

/// Everything one step produces; kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOut {
    /// Input gate, sigmoid. The forget gate is `1 - i`, never stored.
    pub i: Vec<f64>,
    /// Output gate, sigmoid.
    pub o: Vec<f64>,
    /// Candidate cell values, tanh.
    pub g: Vec<f64>,
    /// New cell state `(1 - i) * c_prev + i * g`.
    pub c: Vec<f64>,
    /// `tanh(c)`, cached for the backward pass.
    pub tanh_c: Vec<f64>,
    /// New hidden state `o * tanh(c)`.
    pub hid: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `b + [x; h_prev] * w` for one gate; `w` is row-major
/// `(input_dim + hidden_dim) x hidden_dim`.
fn gate_preact(w: &[f64], b: &[f64], x: &[f64], h_prev: &[f64], hidden: usize) -> Vec<f64> {
    let mut a = b.to_vec();
    for (r, &xr) in x.iter().enumerate() {
        let row = &w[r * hidden..(r + 1) * hidden];
        for (aj, &wj) in a.iter_mut().zip(row) {
            *aj += xr * wj;
        }
    }
    let base = x.len();
    for (r, &hr) in h_prev.iter().enumerate() {
        let row = &w[(base + r) * hidden..(base + r + 1) * hidden];
        for (aj, &wj) in a.iter_mut().zip(row) {
            *aj += hr * wj;
        }
    }
    a
}

/// Advances the cell one step. The update, per unit `j`:
///
/// ```text
/// i = sigmoid(W_i [x; h] + b_i)
/// o = sigmoid(W_o [x; h] + b_o)
/// g = tanh   (W_g [x; h] + b_g)
/// c' = (1 - i) * c + i * g
/// h' = o * tanh(c')
/// ```
///
/// `c'` is computed exactly as `(1 - i[j]) * c[j] + i[j] * g[j]`.
pub fn cifg_step(layer: &CifgLayer, x: &[f64], c_prev: &[f64], h_prev: &[f64]) -> StepOut {
    let h = layer.hidden_dim;
    assert_eq!(x.len(), layer.input_dim, "input width mismatch");
    assert_eq!(c_prev.len(), h, "cell state width mismatch");
    assert_eq!(h_prev.len(), h, "hidden state width mismatch");

    let mut i = gate_preact(&layer.w_i, &layer.b_i, x, h_prev, h);
    let mut o = gate_preact(&layer.w_o, &layer.b_o, x, h_prev, h);
    let mut g = gate_preact(&layer.w_g, &layer.b_g, x, h_prev, h);
    for v in i.iter_mut() {
        *v = sigmoid(*v);
    }
    for v in o.iter_mut() {
        *v = sigmoid(*v);
    }
    for v in g.iter_mut() {
        *v = v.tanh();
    }

    let mut c = vec![0.0; h];
    let mut tanh_c = vec![0.0; h];
    let mut hid = vec![0.0; h];
    for j in 0..h {
        c[j] = (1.0 - i[j]) * c_prev[j] + i[j] * g[j];
        tanh_c[j] = c[j].tanh();
        hid[j] = o[j] * tanh_c[j];
    }
    StepOut {
        i,
        o,
        g,
        c,
        tanh_c,
        hid,
    }
}
