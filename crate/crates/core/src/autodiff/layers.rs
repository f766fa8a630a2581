//! Composite layers built from tape primitives.

use super::{AutodiffError, Result, Tape, Var};

/// `x [..., d_in] · W [d_in, d_out] + b`, keeping the leading dimensions.
pub fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let (d_in, d_out) = match tape.shape(w) {
        [i, o] => (*i, *o),
        s => return Err(AutodiffError::Shape(format!("linear weight must be 2-D, got {s:?}"))),
    };
    let x_shape = tape.shape(x).to_vec();
    if x_shape.last() != Some(&d_in) {
        return Err(AutodiffError::Shape(format!("linear: input {x_shape:?} against weight [{d_in}, {d_out}]")));
    }
    let rows = tape.value(x).len() / d_in;
    let x2 = if x_shape.len() == 2 { x } else { tape.reshape(x, vec![rows, d_in])? };
    let y = tape.matmul(x2, w)?;
    let y = tape.add_row_bias(y, b)?;
    let mut out_shape = x_shape;
    *out_shape.last_mut().expect("non-empty") = d_out;
    if out_shape.len() == 2 {
        Ok(y)
    } else {
        tape.reshape(y, out_shape)
    }
}

/// Projection weights of one attention block. Every `w_q[i]`, `w_k[i]`,
/// `w_v[i]` is `[d, d_k]`; `w_o` is `[H·d_k, d]` and `b_o` is `[d]`.
#[derive(Debug, Clone)]
pub struct MhaVars {
    pub w_q: Vec<Var>,
    pub w_k: Vec<Var>,
    pub w_v: Vec<Var>,
    pub w_o: Var,
    pub b_o: Var,
}

/// Output of [`multi_head_attention`].
#[derive(Debug, Clone)]
pub struct MhaOutput {
    pub output: Var,
    /// One `[T, T]` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

/// `ReLU(concat_i softmax(Q_i K_iᵀ / √d_k) V_i · W_O + b_O)` over tokens `f [T, d]`.
pub fn multi_head_attention(tape: &mut Tape<'_>, f: Var, p: &MhaVars) -> Result<MhaOutput> {
    let f_t = tape.transpose(f)?;
    let out = multi_head_attention_t(tape, f_t, p)?;
    Ok(MhaOutput {
        output: tape.transpose(out.output)?,
        weights: out.weights,
    })
}

/// [`multi_head_attention`] on the transposed layout: takes `fᵀ [d, T]` and
/// returns the output as `[d, T]`. Every product here has `T` as its inner
/// loop, which is much faster than the token-major layout when `d_k` is small.
pub fn multi_head_attention_t(tape: &mut Tape<'_>, f_t: Var, p: &MhaVars) -> Result<MhaOutput> {
    let h = p.w_q.len();
    if h == 0 || p.w_k.len() != h || p.w_v.len() != h {
        return Err(AutodiffError::Shape(format!(
            "{} query, {} key, {} value projections",
            p.w_q.len(),
            p.w_k.len(),
            p.w_v.len()
        )));
    }
    let d_k = match tape.shape(p.w_q[0]) {
        [_, k] => *k,
        s => return Err(AutodiffError::Shape(format!("query projection must be 2-D, got {s:?}"))),
    };
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(h);
    let mut weights = Vec::with_capacity(h);
    for i in 0..h {
        // Qᵀ, Kᵀ, Vᵀ: [d_k, T]
        let q_t = tape.matmul_tn(p.w_q[i], f_t)?;
        let q_t = tape.scale(q_t, scale);
        let k_t = tape.matmul_tn(p.w_k[i], f_t)?;
        let v_t = tape.matmul_tn(p.w_v[i], f_t)?;
        // (Q Kᵀ)ᵀ = K Qᵀ, softmax down each column
        let scores_t = tape.matmul_tn(k_t, q_t)?;
        let a_t = tape.softmax(scores_t, 0)?;
        // (A V)ᵀ = Vᵀ Aᵀ
        heads.push(tape.matmul(v_t, a_t)?);
        weights.push(tape.transpose(a_t)?);
    }
    let cat_t = if h == 1 { heads[0] } else { tape.concat_rows(&heads)? };
    let proj_t = tape.matmul_tn(p.w_o, cat_t)?;
    let proj_t = tape.add_col_bias(proj_t, p.b_o)?;
    Ok(MhaOutput {
        output: tape.relu(proj_t),
        weights,
    })
}
