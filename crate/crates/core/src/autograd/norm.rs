use super::{BackwardFn, Graph, Tensor, Var};

const EPS: f32 = 1e-5;

/// Layer normalisation over the last axis with a learned affine.
pub fn layer_norm(g: &Graph, x: &Var, gamma: &Var, beta: &Var) -> Var {
    let c = x.value().channels();
    assert_eq!(gamma.shape(), &[c]);
    assert_eq!(beta.shape(), &[c]);
    let rows = x.value().len() / c;
    let (gm, bt) = (gamma.value().data(), beta.value().data());
    let mut out = Vec::with_capacity(rows * c);
    let mut xhat = Vec::with_capacity(rows * c);
    let mut rstd = Vec::with_capacity(rows);
    for row in x.value().data().chunks_exact(c) {
        let mean = row.iter().sum::<f32>() / c as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
        let r = 1.0 / (var + EPS).sqrt();
        rstd.push(r);
        for j in 0..c {
            let n = (row[j] - mean) * r;
            xhat.push(n);
            out.push(n * gm[j] + bt[j]);
        }
    }
    let gamma_t = gamma.shared();
    g.record(Tensor::new(x.shape().to_vec(), out), &[x, gamma, beta], move || {
        Box::new(move |grad: &Tensor, needs: &[bool]| {
            let gd = grad.data();
            let gm = gamma_t.data();
            let mut dgamma = vec![0f32; c];
            let mut dbeta = vec![0f32; c];
            let mut dx = needs[0].then(|| vec![0f32; rows * c]);
            let mut gh = vec![0f32; c];
            for r in 0..rows {
                let gr = &gd[r * c..(r + 1) * c];
                let xr = &xhat[r * c..(r + 1) * c];
                for j in 0..c {
                    dgamma[j] += gr[j] * xr[j];
                    dbeta[j] += gr[j];
                    gh[j] = gr[j] * gm[j];
                }
                if let Some(dx) = dx.as_mut() {
                    let mean_g = gh.iter().sum::<f32>() / c as f32;
                    let mean_gx = gh.iter().zip(xr).map(|(a, b)| a * b).sum::<f32>() / c as f32;
                    for j in 0..c {
                        dx[r * c + j] = rstd[r] * (gh[j] - mean_g - xr[j] * mean_gx);
                    }
                }
            }
            vec![
                dx.map(|v| Tensor::new(grad.shape().to_vec(), v)),
                needs[1].then(|| Tensor::new(vec![c], dgamma)),
                needs[2].then(|| Tensor::new(vec![c], dbeta)),
            ]
        }) as BackwardFn
    })
}
