//! Double-precision reference implementation of the proposed architecture
//! (conditional linear, 1x1 convolution, conditional affine coupling) used
//! as an independent gradient oracle.

use std::collections::BTreeMap;

use srgbflow::{Conditioning, ContextBatch, FlowModel, LayerDesc};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const BOUND: f64 = 5.0;

pub type Params64 = BTreeMap<String, Vec<f64>>;

pub fn params64(model: &FlowModel) -> Params64 {
    model
        .params()
        .iter()
        .map(|(k, t)| (k.to_string(), t.data().iter().map(|&v| v as f64).collect()))
        .collect()
}

/// Same-padded cross-correlation of one `[c_in,h,w]` image.
fn conv(x: &[f64], c_in: usize, h: usize, w: usize, wt: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    let c_out = b.len();
    let p = k / 2;
    let mut out = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        let plane = &mut out[o * h * w..(o + 1) * h * w];
        plane.fill(b[o]);
        for c in 0..c_in {
            let src = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wt[((o * c_in + c) * k + ky) * k + kx];
                    let (y0, y1) = (p.saturating_sub(ky), (h + p).saturating_sub(ky).min(h));
                    let (x0, x1) = (p.saturating_sub(kx), (w + p).saturating_sub(kx).min(w));
                    for y in y0..y1 {
                        let sy = y + ky - p;
                        for xx in x0..x1 {
                            plane[y * w + xx] += wv * src[sy * w + xx + kx - p];
                        }
                    }
                }
            }
        }
    }
    out
}

fn dense(x: &[f64], wt: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| bo + (0..n).map(|i| wt[o * n + i] * x[i]).sum::<f64>())
        .collect()
}

fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

fn det3(m: &[f64]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6])
}

/// Per-item activations and accumulated logdet.
type State = Vec<(Vec<f64>, f64)>;

fn initial_state(x: &[f64], n: usize) -> State {
    let dims = x.len() / n;
    (0..n).map(|i| (x[i * dims..(i + 1) * dims].to_vec(), 0.0)).collect()
}

/// Applies layer `li` to every item of `state`.
fn apply_layer(model: &FlowModel, p: &Params64, li: usize, ctx: &ContextBatch, state: &mut State) {
    let spec = model.spec();
    let grid = ctx.grid;
    let s = ctx.clean.shape();
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    let dims = 3 * plane;
    let name = spec.layer_name(li);
    let get = |k: &str| &p[&format!("{name}.{k}")];
    for (item, (v, ld)) in state.iter_mut().enumerate() {
        let (cam, iso) = (ctx.cameras[item], ctx.isos[item]);
        match &spec.layers[li] {
            LayerDesc::CondLinear { cond: Conditioning::CAMERA_ISO, tied: false, bias: true } => {
                let row = cam * grid.n_iso + iso;
                let (ls, t) = (get("log_scale"), get("bias"));
                for c in 0..3 {
                    let (a, b) = (ls[row * 3 + c], t[row * 3 + c]);
                    v[c * plane..(c + 1) * plane].iter_mut().for_each(|e| *e = *e * a.exp() + b);
                    *ld += a * plane as f64;
                }
            }
            LayerDesc::Conv1x1 => {
                let m = get("weight");
                let old = v.clone();
                for c in 0..3 {
                    for q in 0..plane {
                        v[c * plane + q] = (0..3).map(|d| m[c * 3 + d] * old[d * plane + q]).sum();
                    }
                }
                *ld += plane as f64 * det3(m).abs().ln();
            }
            LayerDesc::CondAffineCoupling { cond: Conditioning::ALL } => {
                let mut hdn = v[..plane].to_vec();
                hdn.extend(ctx.clean.data()[item * dims..(item + 1) * dims].iter().map(|&c| c as f64));
                let mut c_in = 4;
                let mut depth = 0;
                while p.contains_key(&format!("{name}.st.conv{depth}.w")) {
                    depth += 1;
                }
                for i in 0..depth {
                    let (wt, b) = (get(&format!("st.conv{i}.w")), get(&format!("st.conv{i}.b")));
                    let k = ((wt.len() / (b.len() * c_in)) as f64).sqrt().round() as usize;
                    hdn = conv(&hdn, c_in, h, w, wt, b, k);
                    c_in = b.len();
                    if i + 1 < depth {
                        relu(&mut hdn);
                    }
                }
                let mut oh = vec![0.0; grid.n_cam + grid.n_iso];
                oh[cam] = 1.0;
                oh[grid.n_cam + iso] = 1.0;
                let mut h1 = dense(&oh, get("fr.w1"), get("fr.b1"));
                relu(&mut h1);
                let mut h2 = dense(&h1, get("fr.w2"), get("fr.b2"));
                relu(&mut h2);
                let sum: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| a + b).collect();
                let r = 1.0 + dense(&sum, get("fr.w3"), get("fr.b3"))[0];
                for q in 0..2 * plane {
                    let sc = BOUND * (hdn[q] * r / BOUND).tanh();
                    v[plane + q] = v[plane + q] * sc.exp() + hdn[2 * plane + q];
                    *ld += sc;
                }
            }
            other => panic!("oracle does not cover {}", other.type_name()),
        }
    }
}

fn nll_of(state: &State) -> f64 {
    let dims = state[0].0.len();
    let total: f64 = state
        .iter()
        .map(|(v, ld)| 0.5 * v.iter().map(|z| z * z).sum::<f64>() - ld + 0.5 * dims as f64 * LN_2PI)
        .sum();
    total / state.len() as f64 / dims as f64
}

/// Mean NLL per dimension of `x` (`[N,3,H,W]` flattened) under a model built
/// only from conditional linear, 1x1 convolution and fully conditioned affine
/// coupling layers.
pub fn nll_per_dim(model: &FlowModel, p: &Params64, x: &[f64], ctx: &ContextBatch) -> f64 {
    let mut state = initial_state(x, ctx.len());
    for li in 0..model.spec().layers.len() {
        apply_layer(model, p, li, ctx, &mut state);
    }
    nll_of(&state)
}

/// Central-difference gradient of the reference NLL for every scalar
/// parameter, in the model's parameter order. Layers before the perturbed
/// one are evaluated once.
pub fn fd_gradients(model: &FlowModel, x: &[f64], ctx: &ContextBatch, h: f64) -> Vec<(String, Vec<f64>)> {
    let mut p = params64(model);
    let n_layers = model.spec().layers.len();
    let mut inputs = vec![initial_state(x, ctx.len())];
    for li in 0..n_layers {
        let mut next = inputs[li].clone();
        apply_layer(model, &p, li, ctx, &mut next);
        inputs.push(next);
    }
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    names
        .into_iter()
        .map(|name| {
            let first: usize = name[..name.find('.').unwrap()].parse().unwrap();
            let eval = |p: &Params64| {
                let mut state = inputs[first].clone();
                for li in first..n_layers {
                    apply_layer(model, p, li, ctx, &mut state);
                }
                nll_of(&state)
            };
            let len = p[&name].len();
            let grad = (0..len)
                .map(|k| {
                    let orig = p[&name][k];
                    p.get_mut(&name).unwrap()[k] = orig + h;
                    let plus = eval(&p);
                    p.get_mut(&name).unwrap()[k] = orig - h;
                    let minus = eval(&p);
                    p.get_mut(&name).unwrap()[k] = orig;
                    (plus - minus) / (2.0 * h)
                })
                .collect();
            (name, grad)
        })
        .collect()
}
