//! Scalar-valued differentiable computations over parameter vectors, and the
//! derivative operators built on them: grad, hvp, mixed_vjp.
//!
//! A `ScalarFn` rebuilds its graph on every call from the same constants, so
//! re-evaluation at equal inputs is bit-identical, and every derivative is
//! taken by recording a backward pass on the same tape.

use super::graph::{Graph, Var};
use super::vector::ParamVector;
use crate::error::{BlissError, Result};

/// Graph leaves mirroring the blocks of one ParamVector.
pub struct BlockVars {
    vars: Vec<(String, Var)>,
}

impl BlockVars {
    pub fn bind(g: &mut Graph, params: &ParamVector) -> BlockVars {
        let vars = params
            .blocks()
            .map(|(name, tensor)| (name.to_string(), g.labeled_leaf(tensor.clone(), name)))
            .collect();
        BlockVars { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("no block named '{name}'"))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| *v).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.iter().map(|(n, _)| n.as_str())
    }
}

/// A recorded scalar computation of one parameter vector.
pub trait ScalarFn {
    fn build(&self, g: &mut Graph, theta: &BlockVars) -> Var;
}

/// A recorded scalar computation of two parameter vectors (outer, inner).
pub trait ScalarFn2 {
    fn build(&self, g: &mut Graph, outer: &BlockVars, inner: &BlockVars) -> Var;
}

impl<F: Fn(&mut Graph, &BlockVars) -> Var> ScalarFn for F {
    fn build(&self, g: &mut Graph, theta: &BlockVars) -> Var {
        self(g, theta)
    }
}

impl<F: Fn(&mut Graph, &BlockVars, &BlockVars) -> Var> ScalarFn2 for F {
    fn build(&self, g: &mut Graph, outer: &BlockVars, inner: &BlockVars) -> Var {
        self(g, outer, inner)
    }
}

fn check_fault(g: &Graph) -> Result<()> {
    match g.fault() {
        Some(f) => Err(BlissError::Differentiation(f.to_string())),
        None => Ok(()),
    }
}

fn extract(g: &Graph, params: &ParamVector, grads: &[Var]) -> Result<ParamVector> {
    let mut out = ParamVector::new();
    for ((name, _), var) in params.blocks().zip(grads) {
        let t = g.value(*var).clone();
        if !t.all_finite() {
            return Err(BlissError::Differentiation(format!(
                "non-finite gradient for block '{name}'"
            )));
        }
        out.push(name, t)?;
    }
    Ok(out)
}

/// Evaluate the scalar at `at`.
pub fn eval(f: &dyn ScalarFn, at: &ParamVector) -> Result<f64> {
    let mut g = Graph::new();
    let theta = BlockVars::bind(&mut g, at);
    let out = f.build(&mut g, &theta);
    check_fault(&g)?;
    Ok(g.value(out).item())
}

/// d f / d theta, conformant with `wrt`.
pub fn grad(f: &dyn ScalarFn, wrt: &ParamVector) -> Result<ParamVector> {
    Ok(grad_and_value(f, wrt)?.0)
}

/// Gradient plus the forward value (one recording).
pub fn grad_and_value(f: &dyn ScalarFn, wrt: &ParamVector) -> Result<(ParamVector, f64)> {
    let mut g = Graph::new();
    let theta = BlockVars::bind(&mut g, wrt);
    let out = f.build(&mut g, &theta);
    check_fault(&g)?;
    let value = g.value(out).item();
    let grads = g.backward(out, &theta.vars());
    check_fault(&g)?;
    Ok((extract(&g, wrt, &grads)?, value))
}

/// Hessian-vector product: differentiate <grad f, v> with v held constant.
pub fn hvp(f: &dyn ScalarFn, wrt: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
    if !wrt.conformant(v) {
        return Err(BlissError::Shape("hvp: v not conformant with wrt".into()));
    }
    let mut g = Graph::new();
    let theta = BlockVars::bind(&mut g, wrt);
    let out = f.build(&mut g, &theta);
    check_fault(&g)?;
    let grads = g.backward(out, &theta.vars());
    let s = dot_with_constant(&mut g, &grads, v);
    let hv = g.backward(s, &theta.vars());
    check_fault(&g)?;
    extract(&g, wrt, &hv)
}

/// Mixed second-order product: d/d outer of <d f / d inner, z>, with z
/// constant. Realizes the cross-parameter Hessian contraction of the
/// hypergradient.
pub fn mixed_vjp(
    f: &dyn ScalarFn2,
    outer: &ParamVector,
    inner: &ParamVector,
    z: &ParamVector,
) -> Result<ParamVector> {
    if !inner.conformant(z) {
        return Err(BlissError::Shape("mixed_vjp: z not conformant with inner".into()));
    }
    let mut g = Graph::new();
    let outer_vars = BlockVars::bind(&mut g, outer);
    let inner_vars = BlockVars::bind(&mut g, inner);
    let out = f.build(&mut g, &outer_vars, &inner_vars);
    check_fault(&g)?;
    let grads_inner = g.backward(out, &inner_vars.vars());
    let s = dot_with_constant(&mut g, &grads_inner, z);
    let mixed = g.backward(s, &outer_vars.vars());
    check_fault(&g)?;
    extract(&g, outer, &mixed)
}

/// Scalar node <grads, v> with v entering as constants, in block order.
fn dot_with_constant(g: &mut Graph, grads: &[Var], v: &ParamVector) -> Var {
    let mut acc: Option<Var> = None;
    for (gv, (_, tv)) in grads.iter().zip(v.blocks()) {
        let c = g.constant(tv.clone());
        let prod = g.mul(*gv, c);
        let s = g.sum_all(prod);
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    acc.expect("dot over empty parameter vector")
}

/// A prepared Hessian-vector product: records the forward and first backward
/// once and replays only the final backward per vector. Equivalent to calling
/// `hvp` repeatedly at a fixed point, with the recording cost paid once.
pub struct PreparedHvp {
    g: Graph,
    vars: Vec<Var>,
    grads: Vec<Var>,
    layout: ParamVector,
    mark: usize,
}

impl PreparedHvp {
    pub fn new(f: &dyn ScalarFn, wrt: &ParamVector) -> Result<PreparedHvp> {
        let mut g = Graph::new();
        let theta = BlockVars::bind(&mut g, wrt);
        let out = f.build(&mut g, &theta);
        check_fault(&g)?;
        let vars = theta.vars();
        let grads = g.backward(out, &vars);
        check_fault(&g)?;
        let mark = g.len();
        Ok(PreparedHvp { g, vars, grads, layout: wrt.zeros_like(), mark })
    }

    /// The recorded gradient at the preparation point.
    pub fn grad(&self) -> Result<ParamVector> {
        extract(&self.g, &self.layout, &self.grads)
    }

    pub fn apply(&mut self, v: &ParamVector) -> Result<ParamVector> {
        if !self.layout.conformant(v) {
            return Err(BlissError::Shape("prepared hvp: non-conformant v".into()));
        }
        let s = dot_with_constant(&mut self.g, &self.grads, v);
        let hv = self.g.backward(s, &self.vars);
        check_fault(&self.g)?;
        let out = extract(&self.g, &self.layout, &hv);
        self.g.truncate(self.mark);
        out
    }
}
