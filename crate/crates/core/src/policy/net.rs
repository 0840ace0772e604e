use super::{Layout, PolicyError, PolicyParams, RecurrentState, MISC_DIM};
use crate::embodiment::NUM_ACTIONS;

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: [f64; NUM_ACTIONS],
    pub value: f64,
    pub h_next: RecurrentState,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    g: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    /// Hidden-side candidate pre-activation, before the reset gate.
    hn: Vec<f64>,
    h_next: Vec<f64>,
}

/// `out = W x + b` with `W` row-major `out.len() x x.len()`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(cols).zip(b)) {
        *o = bias + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

/// `dW += dy x^T`, `db += dy`, and `dx += W^T dy` when asked.
fn affine_back(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let cols = x.len();
    for ((row_g, d), bg) in dw.chunks_exact_mut(cols).zip(dy).zip(db.iter_mut()) {
        *bg += d;
        if *d != 0.0 {
            for (g, v) in row_g.iter_mut().zip(x) {
                *g += d * v;
            }
        }
    }
    if let Some(dx) = dx {
        for (row, d) in w.chunks_exact(cols).zip(dy) {
            if *d != 0.0 {
                for (g, a) in dx.iter_mut().zip(row) {
                    *g += d * a;
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_shapes(params: &PolicyParams, obs: &[f64], h: &[f64]) -> Result<(), PolicyError> {
    let c = &params.config;
    if params.values.len() != c.layout().total {
        return Err(PolicyError::ShapeMismatch(format!(
            "params have {} values, layout needs {}",
            params.values.len(),
            c.layout().total
        )));
    }
    if obs.len() != c.obs_dim() {
        return Err(PolicyError::ShapeMismatch(format!(
            "observation has {} values, expected {}",
            obs.len(),
            c.obs_dim()
        )));
    }
    if h.len() != c.hidden {
        return Err(PolicyError::ShapeMismatch(format!(
            "hidden state has {} values, expected {}",
            h.len(),
            c.hidden
        )));
    }
    Ok(())
}

fn forward_inner(
    params: &PolicyParams,
    l: &Layout,
    obs: &[f64],
    h_prev: &[f64],
) -> (StepOutput, StepCache) {
    let c = &params.config;
    let p = &params.values;
    let hd = c.hidden;
    let pd = c.patch_dim();
    let (patch, rest) = obs.split_at(pd);
    let (pose, misc) = rest.split_at(c.pose_dim);
    debug_assert_eq!(misc.len(), MISC_DIM);

    let mut g = vec![0.0; c.encoded_dim()];
    {
        let (gp, rest) = g.split_at_mut(c.enc_patch);
        let (gq, gm) = rest.split_at_mut(c.enc_pose);
        affine(&p[l.patch_w.clone()], &p[l.patch_b.clone()], patch, gp);
        affine(&p[l.pose_w.clone()], &p[l.pose_b.clone()], pose, gq);
        affine(&p[l.misc_w.clone()], &p[l.misc_b.clone()], misc, gm);
    }
    for v in &mut g {
        *v = v.tanh();
    }

    let mut ax = vec![0.0; 3 * hd];
    let mut ah = vec![0.0; 3 * hd];
    affine(&p[l.gru_wx.clone()], &p[l.gru_bx.clone()], &g, &mut ax);
    affine(&p[l.gru_wh.clone()], &p[l.gru_bh.clone()], h_prev, &mut ah);
    let mut z = vec![0.0; hd];
    let mut r = vec![0.0; hd];
    let mut n = vec![0.0; hd];
    let mut h_next = vec![0.0; hd];
    for k in 0..hd {
        z[k] = sigmoid(ax[k] + ah[k]);
        r[k] = sigmoid(ax[hd + k] + ah[hd + k]);
        n[k] = (ax[2 * hd + k] + r[k] * ah[2 * hd + k]).tanh();
        h_next[k] = (1.0 - z[k]) * n[k] + z[k] * h_prev[k];
    }

    let mut logits = [0.0; NUM_ACTIONS];
    affine(
        &p[l.actor_w.clone()],
        &p[l.actor_b.clone()],
        &h_next,
        &mut logits,
    );
    let mut value = [0.0];
    affine(
        &p[l.critic_w.clone()],
        &p[l.critic_b.clone()],
        &h_next,
        &mut value,
    );

    let out = StepOutput {
        logits,
        value: value[0],
        h_next: RecurrentState { h: h_next.clone() },
    };
    let cache = StepCache {
        g,
        h_prev: h_prev.to_vec(),
        z,
        r,
        n,
        hn: ah[2 * hd..].to_vec(),
        h_next,
    };
    (out, cache)
}

/// One recurrent step: logits over the 6 composite actions, state value and
/// the next hidden state.
pub fn policy_forward(
    params: &PolicyParams,
    obs: &[f64],
    h_prev: &RecurrentState,
) -> Result<StepOutput, PolicyError> {
    check_shapes(params, obs, &h_prev.h)?;
    Ok(forward_inner(params, &params.config.layout(), obs, &h_prev.h).0)
}

/// Accumulates parameter gradients for one step and returns `dL/dh_prev`.
fn backward_inner(
    params: &PolicyParams,
    l: &Layout,
    obs: &[f64],
    cache: &StepCache,
    dlogits: &[f64; NUM_ACTIONS],
    dvalue: f64,
    dh_carry: &[f64],
    grad: &mut [f64],
) -> Vec<f64> {
    let c = &params.config;
    let p = &params.values;
    let hd = c.hidden;

    let mut dh = dh_carry.to_vec();
    {
        let (dw, db) = split2(grad, &l.actor_w, &l.actor_b);
        affine_back(
            &p[l.actor_w.clone()],
            &cache.h_next,
            dlogits,
            dw,
            db,
            Some(&mut dh),
        );
    }
    {
        let (dw, db) = split2(grad, &l.critic_w, &l.critic_b);
        affine_back(
            &p[l.critic_w.clone()],
            &cache.h_next,
            &[dvalue],
            dw,
            db,
            Some(&mut dh),
        );
    }

    let mut dh_prev = vec![0.0; hd];
    let mut dax = vec![0.0; 3 * hd];
    let mut dah = vec![0.0; 3 * hd];
    for k in 0..hd {
        let (z, r, n) = (cache.z[k], cache.r[k], cache.n[k]);
        let dn = dh[k] * (1.0 - z);
        let dz = dh[k] * (cache.h_prev[k] - n);
        dh_prev[k] = dh[k] * z;
        let dn_pre = dn * (1.0 - n * n);
        let dr = dn_pre * cache.hn[k];
        let dz_pre = dz * z * (1.0 - z);
        let dr_pre = dr * r * (1.0 - r);
        dax[k] = dz_pre;
        dax[hd + k] = dr_pre;
        dax[2 * hd + k] = dn_pre;
        dah[k] = dz_pre;
        dah[hd + k] = dr_pre;
        dah[2 * hd + k] = dn_pre * r;
    }
    let mut dg = vec![0.0; c.encoded_dim()];
    {
        let (dw, db) = split2(grad, &l.gru_wx, &l.gru_bx);
        affine_back(&p[l.gru_wx.clone()], &cache.g, &dax, dw, db, Some(&mut dg));
    }
    {
        let (dw, db) = split2(grad, &l.gru_wh, &l.gru_bh);
        affine_back(
            &p[l.gru_wh.clone()],
            &cache.h_prev,
            &dah,
            dw,
            db,
            Some(&mut dh_prev),
        );
    }

    for (d, g) in dg.iter_mut().zip(&cache.g) {
        *d *= 1.0 - g * g;
    }
    let pd = c.patch_dim();
    let (patch, rest) = obs.split_at(pd);
    let (pose, misc) = rest.split_at(c.pose_dim);
    let (dgp, rest) = dg.split_at(c.enc_patch);
    let (dgq, dgm) = rest.split_at(c.enc_pose);
    {
        let (dw, db) = split2(grad, &l.patch_w, &l.patch_b);
        affine_back(&p[l.patch_w.clone()], patch, dgp, dw, db, None);
    }
    {
        let (dw, db) = split2(grad, &l.pose_w, &l.pose_b);
        affine_back(&p[l.pose_w.clone()], pose, dgq, dw, db, None);
    }
    {
        let (dw, db) = split2(grad, &l.misc_w, &l.misc_b);
        affine_back(&p[l.misc_w.clone()], misc, dgm, dw, db, None);
    }
    dh_prev
}

/// Disjoint mutable views of a weight range and the bias range right after it.
fn split2<'a>(
    grad: &'a mut [f64],
    w: &std::ops::Range<usize>,
    b: &std::ops::Range<usize>,
) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(w.end <= b.start);
    let (head, tail) = grad.split_at_mut(b.start);
    (&mut head[w.clone()], &mut tail[..b.len()])
}

/// One step of a training sequence. `reset` zeroes the incoming hidden
/// state, which also stops gradients flowing into earlier steps.
#[derive(Debug, Clone, Copy)]
pub struct SequenceStep<'a> {
    pub obs: &'a [f64],
    pub reset: bool,
}

/// Backpropagation through time over one sequence. `head_grad` receives
/// each step's output and returns `(dL/dlogits, dL/dvalue)`; gradients are
/// added into `grad`.
pub fn sequence_grad<F>(
    params: &PolicyParams,
    h0: &RecurrentState,
    steps: &[SequenceStep<'_>],
    mut head_grad: F,
    grad: &mut [f64],
) -> Result<(), PolicyError>
where
    F: FnMut(usize, &StepOutput) -> ([f64; NUM_ACTIONS], f64),
{
    if grad.len() != params.values.len() {
        return Err(PolicyError::ShapeMismatch("gradient buffer length".into()));
    }
    let l = params.config.layout();
    let zeros = vec![0.0; params.config.hidden];
    let mut h = h0.h.clone();
    let mut caches = Vec::with_capacity(steps.len());
    let mut heads = Vec::with_capacity(steps.len());
    for (t, s) in steps.iter().enumerate() {
        if s.reset {
            h.copy_from_slice(&zeros);
        }
        check_shapes(params, s.obs, &h)?;
        let (out, cache) = forward_inner(params, &l, s.obs, &h);
        heads.push(head_grad(t, &out));
        h = out.h_next.h;
        caches.push(cache);
    }
    let mut dh = zeros.clone();
    for t in (0..steps.len()).rev() {
        let (dl, dv) = heads[t];
        let dh_prev = backward_inner(params, &l, steps[t].obs, &caches[t], &dl, dv, &dh, grad);
        dh = if steps[t].reset {
            zeros.clone()
        } else {
            dh_prev
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use crate::rng::substream;
    use rand::Rng;

    /// Independent straight-line GRU step using explicit index arithmetic.
    fn reference_step(p: &PolicyParams, obs: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let c = &p.config;
        let l = c.layout();
        let v = &p.values;
        let enc = |w0: usize, b0: usize, rows: usize, x: &[f64]| -> Vec<f64> {
            (0..rows)
                .map(|i| {
                    let mut s = v[b0 + i];
                    for j in 0..x.len() {
                        s += v[w0 + i * x.len() + j] * x[j];
                    }
                    s.tanh()
                })
                .collect()
        };
        let pd = c.patch_dim();
        let mut g = enc(l.patch_w.start, l.patch_b.start, c.enc_patch, &obs[..pd]);
        g.extend(enc(
            l.pose_w.start,
            l.pose_b.start,
            c.enc_pose,
            &obs[pd..pd + c.pose_dim],
        ));
        g.extend(enc(
            l.misc_w.start,
            l.misc_b.start,
            c.enc_misc,
            &obs[pd + c.pose_dim..],
        ));
        let hd = c.hidden;
        let gx = |row: usize| -> f64 {
            let mut s = v[l.gru_bx.start + row];
            for j in 0..g.len() {
                s += v[l.gru_wx.start + row * g.len() + j] * g[j];
            }
            s
        };
        let gh = |row: usize| -> f64 {
            let mut s = v[l.gru_bh.start + row];
            for j in 0..hd {
                s += v[l.gru_wh.start + row * hd + j] * h[j];
            }
            s
        };
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut hn = vec![0.0; hd];
        for k in 0..hd {
            let z = sig(gx(k) + gh(k));
            let r = sig(gx(hd + k) + gh(hd + k));
            let n = (gx(2 * hd + k) + r * gh(2 * hd + k)).tanh();
            hn[k] = (1.0 - z) * n + z * h[k];
        }
        let logits = (0..NUM_ACTIONS)
            .map(|a| {
                v[l.actor_b.start + a]
                    + (0..hd)
                        .map(|k| v[l.actor_w.start + a * hd + k] * hn[k])
                        .sum::<f64>()
            })
            .collect();
        let value = v[l.critic_b.start]
            + (0..hd)
                .map(|k| v[l.critic_w.start + k] * hn[k])
                .sum::<f64>();
        (hn, logits, value)
    }

    #[test]
    fn matches_reference_cell() {
        let c = PolicyConfig {
            patch: 3,
            pose_dim: 8,
            hidden: 5,
            enc_patch: 2,
            enc_pose: 3,
            enc_misc: 4,
            ..Default::default()
        };
        let mut rng = substream(11, "t", 0);
        let mut p = PolicyParams::init(&c, &mut rng);
        for v in &mut p.values {
            *v += rng.gen_range(-0.5..0.5);
        }
        let obs: Vec<f64> = (0..c.obs_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..c.hidden).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let out = policy_forward(&p, &obs, &RecurrentState { h: h.clone() }).unwrap();
        let (hn, logits, value) = reference_step(&p, &obs, &h);
        for k in 0..c.hidden {
            assert!((out.h_next.h[k] - hn[k]).abs() < 1e-9);
        }
        for a in 0..NUM_ACTIONS {
            assert!((out.logits[a] - logits[a]).abs() < 1e-9);
        }
        assert!((out.value - value).abs() < 1e-9);
        assert!(out
            .h_next
            .h
            .iter()
            .zip(&h)
            .any(|(a, b)| (a - b).abs() > 1e-6));
    }
}
