//! The trainable encoder: masked mean pooling followed by a two-layer tanh
//! network, h = W2 * tanh(W1 * pool(emb) + b1) + b2.
//!
//! Gradients are exact and hand-derived; [`encode_backward`] is checked
//! against central finite differences in the tests. Parameters serialize to a
//! small versioned text checkpoint (see [`save_checkpoint`]).

use crate::error::{Error, Result};
use crate::numeric::{all_finite, dot, masked_mean_pool, TokenMatrix};
use crate::streams::gaussian;
use rand::Rng;
use std::io::Write;
use std::path::Path;

/// Parameters of the two-layer encoder. W1 is d_hidden x d and W2 is
/// d_out x d_hidden, both row-major; biases start at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub d: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl EncoderParams {
    /// All-zero parameters of the given shape (used for gradient
    /// accumulators and as a building block in tests).
    pub fn zeros(d: usize, d_hidden: usize, d_out: usize) -> Result<Self> {
        if d == 0 || d_hidden == 0 || d_out == 0 {
            return Err(Error::Config(format!(
                "encoder dimensions must be positive, got d={d}, d_hidden={d_hidden}, d_out={d_out}"
            )));
        }
        Ok(EncoderParams {
            d,
            d_hidden,
            d_out,
            w1: vec![0.0; d_hidden * d],
            b1: vec![0.0; d_hidden],
            w2: vec![0.0; d_out * d_hidden],
            b2: vec![0.0; d_out],
        })
    }

    /// Seeded initialization: weights Gaussian with sigma = 1/sqrt(fan_in),
    /// biases zero.
    pub fn init_gaussian<R: Rng>(d: usize, d_hidden: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        let mut p = EncoderParams::zeros(d, d_hidden, d_out)?;
        let s1 = 1.0 / (d as f64).sqrt();
        for w in &mut p.w1 {
            *w = gaussian(rng, s1);
        }
        let s2 = 1.0 / (d_hidden as f64).sqrt();
        for w in &mut p.w2 {
            *w = gaussian(rng, s2);
        }
        Ok(p)
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Flattens to a single vector in the order w1, b1, w2, b2 (the same
    /// order the checkpoint file uses).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
        out
    }

    /// Rebuilds parameters of this shape from a flat vector.
    pub fn from_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.n_params() {
            return Err(Error::Domain(format!(
                "from_flat: expected {} values, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut p = self.clone();
        let (a, rest) = flat.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, d) = rest.split_at(self.w2.len());
        p.w1.copy_from_slice(a);
        p.b1.copy_from_slice(b);
        p.w2.copy_from_slice(c);
        p.b2.copy_from_slice(d);
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.w1) && all_finite(&self.b1) && all_finite(&self.w2) && all_finite(&self.b2)
    }

    /// Largest absolute parameter value (blow-up detector in tests).
    pub fn max_abs(&self) -> f64 {
        self.to_flat().iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

/// Forward-pass cache for [`encode_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeTrace {
    pub pooled: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

/// Runs the two-layer map on an already-pooled input vector.
pub fn encode_pooled(theta: &EncoderParams, pooled: &[f64]) -> Result<EncodeTrace> {
    if pooled.len() != theta.d {
        return Err(Error::Domain(format!(
            "encode: pooled input has dimension {}, encoder expects {}",
            pooled.len(),
            theta.d
        )));
    }
    let mut pre = vec![0.0; theta.d_hidden];
    for k in 0..theta.d_hidden {
        let row = &theta.w1[k * theta.d..(k + 1) * theta.d];
        pre[k] = dot(row, pooled) + theta.b1[k];
    }
    let hidden: Vec<f64> = pre.iter().map(|&x| x.tanh()).collect();
    let mut output = vec![0.0; theta.d_out];
    for o in 0..theta.d_out {
        let row = &theta.w2[o * theta.d_hidden..(o + 1) * theta.d_hidden];
        output[o] = dot(row, &hidden) + theta.b2[o];
    }
    Ok(EncodeTrace {
        pooled: pooled.to_vec(),
        pre_activation: pre,
        hidden,
        output,
    })
}

/// Encodes an augmented embedding matrix: masked mean pool, then the
/// two-layer map. Deterministic; returns the output and the backprop trace.
pub fn encode(theta: &EncoderParams, emb: &TokenMatrix) -> Result<(Vec<f64>, EncodeTrace)> {
    let pooled = masked_mean_pool(emb)?;
    let trace = encode_pooled(theta, &pooled)?;
    Ok((trace.output.clone(), trace))
}

/// Exact gradients of upstream . h with respect to every parameter and the
/// pooled input, given the forward trace.
pub fn encode_backward(
    theta: &EncoderParams,
    trace: &EncodeTrace,
    upstream: &[f64],
) -> Result<(EncoderParams, Vec<f64>)> {
    if upstream.len() != theta.d_out
        || trace.pooled.len() != theta.d
        || trace.hidden.len() != theta.d_hidden
    {
        return Err(Error::Domain(format!(
            "encode_backward: shapes disagree (upstream {}, pooled {}, hidden {} vs d_out {}, d {}, d_hidden {})",
            upstream.len(),
            trace.pooled.len(),
            trace.hidden.len(),
            theta.d_out,
            theta.d,
            theta.d_hidden
        )));
    }
    let mut grads = EncoderParams::zeros(theta.d, theta.d_hidden, theta.d_out)?;
    grads.b2.copy_from_slice(upstream);
    for o in 0..theta.d_out {
        for k in 0..theta.d_hidden {
            grads.w2[o * theta.d_hidden + k] = upstream[o] * trace.hidden[k];
        }
    }
    let mut g_pre = vec![0.0; theta.d_hidden];
    for k in 0..theta.d_hidden {
        let mut acc = 0.0;
        for o in 0..theta.d_out {
            acc += theta.w2[o * theta.d_hidden + k] * upstream[o];
        }
        g_pre[k] = acc * (1.0 - trace.hidden[k] * trace.hidden[k]);
    }
    grads.b1.copy_from_slice(&g_pre);
    for k in 0..theta.d_hidden {
        for j in 0..theta.d {
            grads.w1[k * theta.d + j] = g_pre[k] * trace.pooled[j];
        }
    }
    let mut g_input = vec![0.0; theta.d];
    for j in 0..theta.d {
        let mut acc = 0.0;
        for k in 0..theta.d_hidden {
            acc += theta.w1[k * theta.d + j] * g_pre[k];
        }
        g_input[j] = acc;
    }
    Ok((grads, g_input))
}

/// Accumulates `other` into `acc`, elementwise.
pub fn accumulate_grads(acc: &mut EncoderParams, other: &EncoderParams) {
    for (a, b) in acc.w1.iter_mut().zip(&other.w1) {
        *a += b;
    }
    for (a, b) in acc.b1.iter_mut().zip(&other.b1) {
        *a += b;
    }
    for (a, b) in acc.w2.iter_mut().zip(&other.w2) {
        *a += b;
    }
    for (a, b) in acc.b2.iter_mut().zip(&other.b2) {
        *a += b;
    }
}

/// One plain SGD update, theta' = theta - lr * grads.
///
/// lr = 0 is accepted as an explicit optimizer no-op (the parameters come
/// back bitwise unchanged); non-finite gradients abort with a numeric error.
pub fn sgd_step(theta: &EncoderParams, grads: &EncoderParams, lr: f64) -> Result<EncoderParams> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(Error::Config(format!(
            "learning rate must be finite and nonnegative, got {lr}"
        )));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("sgd_step: non-finite gradient".into()));
    }
    if theta.d != grads.d || theta.d_hidden != grads.d_hidden || theta.d_out != grads.d_out {
        return Err(Error::Domain("sgd_step: gradient shape mismatch".into()));
    }
    let mut out = theta.clone();
    let upd = |p: &mut [f64], g: &[f64]| {
        for (x, gi) in p.iter_mut().zip(g) {
            if lr != 0.0 {
                *x -= lr * gi;
            }
        }
    };
    upd(&mut out.w1, &grads.w1);
    upd(&mut out.b1, &grads.b1);
    upd(&mut out.w2, &grads.w2);
    upd(&mut out.b2, &grads.b2);
    Ok(out)
}

/// Folds fresh gradients into a momentum velocity buffer:
/// v' = momentum * v + grads. With momentum 0 the velocity is the gradient.
pub fn update_velocity(velocity: &mut EncoderParams, grads: &EncoderParams, momentum: f64) {
    let upd = |v: &mut [f64], g: &[f64]| {
        for (x, gi) in v.iter_mut().zip(g) {
            *x = momentum * *x + gi;
        }
    };
    upd(&mut velocity.w1, &grads.w1);
    upd(&mut velocity.b1, &grads.b1);
    upd(&mut velocity.w2, &grads.w2);
    upd(&mut velocity.b2, &grads.b2);
}

const CHECKPOINT_HEADER: &str = "iftcl-checkpoint v1";

/// Writes a checkpoint. Format, one record per line:
///
/// ```text
/// iftcl-checkpoint v1
/// dims <d> <d_hidden> <d_out>
/// w1 <d_hidden*d space-separated values, row-major>
/// b1 <d_hidden values>
/// w2 <d_out*d_hidden values, row-major>
/// b2 <d_out values>
/// ```
///
/// Values use the shortest decimal form that round-trips f64 exactly, so a
/// save/load cycle is bitwise lossless.
pub fn save_checkpoint(theta: &EncoderParams, path: &Path) -> Result<()> {
    let mut s = String::new();
    s.push_str(CHECKPOINT_HEADER);
    s.push('\n');
    s.push_str(&format!("dims {} {} {}\n", theta.d, theta.d_hidden, theta.d_out));
    for (name, vals) in [
        ("w1", &theta.w1),
        ("b1", &theta.b1),
        ("w2", &theta.w2),
        ("b2", &theta.b2),
    ] {
        s.push_str(name);
        for v in vals.iter() {
            s.push(' ');
            s.push_str(&format!("{v}"));
        }
        s.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

fn parse_value_line(
    line: Option<&str>,
    name: &str,
    expected: usize,
    path: &str,
    line_no: usize,
) -> Result<Vec<f64>> {
    let line = line.ok_or_else(|| Error::Parse {
        path: path.to_string(),
        line: line_no,
        msg: format!("missing {name} record"),
    })?;
    let mut it = line.split_whitespace();
    if it.next() != Some(name) {
        return Err(Error::Parse {
            path: path.to_string(),
            line: line_no,
            msg: format!("expected a {name} record"),
        });
    }
    let vals: Vec<f64> = it
        .map(|p| p.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            path: path.to_string(),
            line: line_no,
            msg: format!("bad value in {name} record: {e}"),
        })?;
    if vals.len() != expected {
        return Err(Error::Parse {
            path: path.to_string(),
            line: line_no,
            msg: format!("{name} record has {} values, expected {expected}", vals.len()),
        });
    }
    if !all_finite(&vals) {
        return Err(Error::Parse {
            path: path.to_string(),
            line: line_no,
            msg: format!("{name} record contains a non-finite value"),
        });
    }
    Ok(vals)
}

/// Loads a checkpoint written by [`save_checkpoint`], validating the header,
/// shapes and finiteness of every value.
pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let path_str = path.display().to_string();
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_HEADER) {
        return Err(Error::Parse {
            path: path_str,
            line: 1,
            msg: format!("bad header, expected {CHECKPOINT_HEADER:?}"),
        });
    }
    let dims_line = lines.next().ok_or_else(|| Error::Parse {
        path: path_str.clone(),
        line: 2,
        msg: "missing dims record".into(),
    })?;
    let mut it = dims_line.split_whitespace();
    if it.next() != Some("dims") {
        return Err(Error::Parse {
            path: path_str.clone(),
            line: 2,
            msg: "expected a dims record".into(),
        });
    }
    let dims: Vec<usize> = it
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            path: path_str.clone(),
            line: 2,
            msg: format!("bad dims record: {e}"),
        })?;
    let [d, d_hidden, d_out] = dims.as_slice() else {
        return Err(Error::Parse {
            path: path_str.clone(),
            line: 2,
            msg: format!("dims record has {} numbers, expected 3", dims.len()),
        });
    };
    let (d, d_hidden, d_out) = (*d, *d_hidden, *d_out);
    if d == 0 || d_hidden == 0 || d_out == 0 {
        return Err(Error::Parse {
            path: path_str.clone(),
            line: 2,
            msg: "dims must all be positive".into(),
        });
    }
    let w1 = parse_value_line(lines.next(), "w1", d_hidden * d, &path_str, 3)?;
    let b1 = parse_value_line(lines.next(), "b1", d_hidden, &path_str, 4)?;
    let w2 = parse_value_line(lines.next(), "w2", d_out * d_hidden, &path_str, 5)?;
    let b2 = parse_value_line(lines.next(), "b2", d_out, &path_str, 6)?;
    Ok(EncoderParams {
        d,
        d_hidden,
        d_out,
        w1,
        b1,
        w2,
        b2,
    })
}
