use super::{BackwardFn, Graph, Tensor, Var};

pub fn add(g: &Graph, a: &Var, b: &Var) -> Var {
    assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
    let data = a.value().data().iter().zip(b.value().data()).map(|(x, y)| x + y).collect();
    let shape = a.shape().to_vec();
    g.record(Tensor::new(shape, data), &[a, b], || {
        Box::new(|grad: &Tensor, needs: &[bool]| {
            vec![needs[0].then(|| grad.clone()), needs[1].then(|| grad.clone())]
        }) as BackwardFn
    })
}

pub fn scale(g: &Graph, a: &Var, s: f32) -> Var {
    let data = a.value().data().iter().map(|x| x * s).collect();
    g.record(Tensor::new(a.shape().to_vec(), data), &[a], || {
        Box::new(move |grad: &Tensor, _: &[bool]| {
            let d = grad.data().iter().map(|x| x * s).collect();
            vec![Some(Tensor::new(grad.shape().to_vec(), d))]
        }) as BackwardFn
    })
}

/// `Σ wᵢ·sᵢ` over scalar inputs.
pub fn weighted_sum(g: &Graph, terms: &[(&Var, f32)]) -> Var {
    let total: f32 = terms
        .iter()
        .map(|(v, w)| {
            assert_eq!(v.value().len(), 1, "weighted_sum takes scalars");
            v.value().item() * w
        })
        .sum();
    let weights: Vec<f32> = terms.iter().map(|(_, w)| *w).collect();
    let parents: Vec<&Var> = terms.iter().map(|(v, _)| *v).collect();
    g.record(Tensor::scalar(total), &parents, move || {
        Box::new(move |grad: &Tensor, needs: &[bool]| {
            weights
                .iter()
                .zip(needs)
                .map(|(w, &n)| n.then(|| Tensor::scalar(grad.item() * w)))
                .collect()
        }) as BackwardFn
    })
}

pub fn leaky_relu(g: &Graph, x: &Var, slope: f32) -> Var {
    let data = x
        .value()
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { slope * v })
        .collect();
    let input = x.shared();
    g.record(Tensor::new(x.shape().to_vec(), data), &[x], move || {
        Box::new(move |grad: &Tensor, _: &[bool]| {
            let d = grad
                .data()
                .iter()
                .zip(input.data())
                .map(|(gv, &v)| if v > 0.0 { *gv } else { slope * gv })
                .collect();
            vec![Some(Tensor::new(grad.shape().to_vec(), d))]
        }) as BackwardFn
    })
}

const GELU_K: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_C: f32 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(g: &Graph, x: &Var) -> Var {
    let data = x
        .value()
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_C * v * v * v)).tanh()))
        .collect();
    let input = x.shared();
    g.record(Tensor::new(x.shape().to_vec(), data), &[x], move || {
        Box::new(move |grad: &Tensor, _: &[bool]| {
            let d = grad
                .data()
                .iter()
                .zip(input.data())
                .map(|(gv, &v)| {
                    let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                    gv * (0.5 * (1.0 + t) + 0.5 * v * dt)
                })
                .collect();
            vec![Some(Tensor::new(grad.shape().to_vec(), d))]
        }) as BackwardFn
    })
}

/// Concatenate along the last axis; leading axes must agree.
pub fn concat_channels(g: &Graph, parts: &[&Var]) -> Var {
    assert!(!parts.is_empty());
    let lead = &parts[0].shape()[..parts[0].shape().len() - 1];
    for p in parts {
        assert_eq!(&p.shape()[..p.shape().len() - 1], lead, "concat: leading axes differ");
    }
    let widths: Vec<usize> = parts.iter().map(|p| p.value().channels()).collect();
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &c) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.value().data()[r * c..(r + 1) * c]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    g.record(Tensor::new(shape, data), parts, move || {
        Box::new(move |grad: &Tensor, needs: &[bool]| {
            let mut offset = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let start = offset;
                    offset += c;
                    need.then(|| {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&grad.data()[r * total + start..r * total + start + c]);
                        }
                        let mut s = grad.shape().to_vec();
                        *s.last_mut().unwrap() = c;
                        Tensor::new(s, d)
                    })
                })
                .collect()
        }) as BackwardFn
    })
}
