//! Finite-difference sweep over every differentiable tensor operation and
//! over the paired objectives end to end.

use demp_tensor::{grad_check, grad_check_params, GradCheckReport, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::data::{EncodedExample, SideSeqs};
use crate::error::{Error, Result};
use crate::latent::SampleMode;
use crate::model::{Ctx, DualEmp, Role};
use crate::objectives::paired_terms;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub model: ModelConfig,
    pub h: f64,
    pub tol: f64,
    pub seed: u64,
    /// Perturb every `stride`-th model parameter in the objective checks.
    pub stride: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            model: ModelConfig {
                vocab_size: 12,
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                d_ff: 16,
                k_latent: 2,
                n_labels: 3,
                max_positions: 16,
                dropout: 0.0,
            },
            h: 1e-5,
            tol: 1e-4,
            seed: 0,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEntry {
    pub name: String,
    /// Number of scalars perturbed.
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl SweepEntry {
    fn from_report(name: &str, r: &GradCheckReport) -> Self {
        SweepEntry {
            name: name.to_string(),
            checked: r.analytic.len(),
            max_rel_error: r.max_rel_error,
            passed: r.passed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl SweepReport {
    fn new(entries: Vec<SweepEntry>, tol: f64) -> Self {
        let max_rel_error = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
        SweepReport {
            passed: entries.iter().all(|e| e.passed),
            entries,
            max_rel_error,
            tol,
        }
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{:<28} {:>6} {:>12.3e}  {}\n",
                e.name,
                e.checked,
                e.max_rel_error,
                if e.passed { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "max relative error {:.3e} (tol {:.0e}): {}\n",
            self.max_rel_error,
            self.tol,
            if self.passed { "pass" } else { "fail" }
        ));
        out
    }
}

/// Reduces any tensor to a scalar with fixed, distinct weights so that every
/// output element contributes to the checked gradient.
fn project(t: &Tensor) -> demp_tensor::Result<Tensor> {
    let n = t.numel();
    let w = (0..n).map(|i| ((i as f64 + 1.0) * 0.618_033_988_75).fract() + 0.25).collect();
    let w = t.tape().constant(w, &t.shape())?;
    Ok(t.mul(&w)?.sum())
}

struct OpSweep {
    rng: ChaCha8Rng,
    h: f64,
    tol: f64,
    entries: Vec<SweepEntry>,
}

impl OpSweep {
    fn values(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.gen_range(lo..hi)).collect()
    }

    fn check<F>(&mut self, name: &str, x: Vec<f64>, shape: &[usize], f: F) -> Result<()>
    where
        F: Fn(&Tensor) -> demp_tensor::Result<Tensor>,
    {
        let r = grad_check(|t| project(&f(t)?), &x, shape, self.h, self.tol)?;
        self.entries.push(SweepEntry::from_report(name, &r));
        Ok(())
    }
}

/// Checks each differentiable operation on fixed random inputs, with every
/// tensor operand of binary operations checked separately.
pub fn op_sweep(h: f64, tol: f64, seed: u64) -> Result<Vec<SweepEntry>> {
    let mut s = OpSweep {
        rng: ChaCha8Rng::seed_from_u64(seed),
        h,
        tol,
        entries: Vec::new(),
    };
    let a = s.values(12, -1.0, 1.0);
    let b = s.values(12, -1.0, 1.0);
    let c = s.values(20, -1.0, 1.0);
    let row = s.values(4, -1.0, 1.0);

    let (b1, c1) = (b.clone(), c.clone());
    s.check("matmul.lhs", a.clone(), &[3, 4], move |x| x.matmul(&x.tape().constant(c1.clone(), &[4, 5])?))?;
    let a1 = a.clone();
    s.check("matmul.rhs", c.clone(), &[4, 5], move |x| x.tape().constant(a1.clone(), &[3, 4])?.matmul(x))?;
    s.check("matmul_t.lhs", a.clone(), &[3, 4], move |x| x.matmul_t(&x.tape().constant(b1.clone(), &[3, 4])?))?;
    let a1 = a.clone();
    s.check("matmul_t.rhs", b.clone(), &[3, 4], move |x| x.tape().constant(a1.clone(), &[3, 4])?.matmul_t(x))?;

    for (name, op) in [
        ("add", Tensor::add as fn(&Tensor, &Tensor) -> demp_tensor::Result<Tensor>),
        ("sub", Tensor::sub),
        ("mul", Tensor::mul),
    ] {
        let b1 = b.clone();
        s.check(&format!("{name}.lhs"), a.clone(), &[3, 4], move |x| op(x, &x.tape().constant(b1.clone(), &[3, 4])?))?;
        let a1 = a.clone();
        s.check(&format!("{name}.rhs"), b.clone(), &[3, 4], move |x| op(&x.tape().constant(a1.clone(), &[3, 4])?, x))?;
    }

    let r1 = row.clone();
    s.check("add_broadcast.input", a.clone(), &[3, 4], move |x| x.add_broadcast(&x.tape().constant(r1.clone(), &[4])?))?;
    let a1 = a.clone();
    s.check("add_broadcast.bias", row.clone(), &[4], move |x| x.tape().constant(a1.clone(), &[3, 4])?.add_broadcast(x))?;
    s.check("scale", a.clone(), &[3, 4], |x| Ok(x.scale(-1.7)))?;
    s.check("neg", a.clone(), &[3, 4], |x| Ok(x.neg()))?;
    s.check("scale_by.input", a.clone(), &[3, 4], |x| x.scale_by(&x.tape().scalar(0.8)))?;
    let a1 = a.clone();
    s.check("scale_by.factor", vec![0.8], &[1], move |x| x.tape().constant(a1.clone(), &[3, 4])?.scale_by(x))?;

    let away_from_kink: Vec<f64> = a.iter().map(|v| v + 0.1 * v.signum()).collect();
    s.check("relu", away_from_kink, &[3, 4], |x| Ok(x.relu()))?;
    s.check("exp", a.clone(), &[3, 4], |x| Ok(x.exp()))?;
    let positive: Vec<f64> = a.iter().map(|v| v.abs() + 0.2).collect();
    s.check("ln", positive, &[3, 4], |x| Ok(x.ln()))?;
    for axis in 0..2 {
        s.check(&format!("softmax.axis{axis}"), a.clone(), &[3, 4], move |x| x.softmax(axis))?;
        s.check(&format!("log_softmax.axis{axis}"), a.clone(), &[3, 4], move |x| x.log_softmax(axis))?;
    }

    let gain = s.values(4, 0.5, 1.5);
    let bias = s.values(4, -0.5, 0.5);
    let (g1, b1) = (gain.clone(), bias.clone());
    s.check("layer_norm.input", a.clone(), &[3, 4], move |x| {
        let t = x.tape();
        x.layer_norm(&t.constant(g1.clone(), &[4])?, &t.constant(b1.clone(), &[4])?, 1e-5)
    })?;
    let (a1, b1) = (a.clone(), bias.clone());
    s.check("layer_norm.gain", gain.clone(), &[4], move |x| {
        let t = x.tape();
        t.constant(a1.clone(), &[3, 4])?.layer_norm(x, &t.constant(b1.clone(), &[4])?, 1e-5)
    })?;
    let (a1, g1) = (a.clone(), gain.clone());
    s.check("layer_norm.bias", bias, &[4], move |x| {
        let t = x.tape();
        t.constant(a1.clone(), &[3, 4])?.layer_norm(&t.constant(g1.clone(), &[4])?, x, 1e-5)
    })?;

    s.check("embedding", c.clone(), &[5, 4], |x| x.embedding(&[4, 0, 4, 2]))?;
    s.check("cross_entropy", c.clone(), &[4, 5], |x| x.cross_entropy(&[1, 4, 0, 2], None))?;
    s.check("cross_entropy.ignore", c.clone(), &[4, 5], |x| x.cross_entropy(&[1, 0, 3, 0], Some(0)))?;
    s.check("sum", a.clone(), &[3, 4], |x| Ok(x.sum()))?;
    s.check("mean", a.clone(), &[3, 4], |x| Ok(x.mean()))?;
    s.check("transpose", a.clone(), &[3, 4], |x| x.transpose())?;
    s.check("reshape", a.clone(), &[3, 4], |x| x.reshape(&[2, 6]))?;
    for axis in 0..2 {
        let b1 = b.clone();
        s.check(&format!("concat.axis{axis}"), a.clone(), &[3, 4], move |x| {
            let other = x.tape().constant(b1.clone(), &[3, 4])?;
            Tensor::concat(&[x.clone(), other, x.clone()], axis)
        })?;
    }
    s.check("stack_scalars", row.clone(), &[4], |x| {
        let items = [x.index(3)?, x.index(0)?.exp(), x.index(3)?];
        Tensor::stack_scalars(&items)
    })?;
    s.check("slice.axis0", a.clone(), &[3, 4], |x| x.slice(0, 1, 2))?;
    s.check("slice.axis1", a.clone(), &[3, 4], |x| x.slice(1, 1, 2))?;
    s.check("row", a.clone(), &[3, 4], |x| x.row(2))?;
    s.check("index", row, &[4], |x| x.index(1))?;
    s.check("dropout", a, &[3, 4], |x| x.dropout(0.4, &mut ChaCha8Rng::seed_from_u64(7)))?;
    Ok(s.entries)
}

fn tensor_error(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}

/// A two-turn context and a response drawn from the non-special ids.
fn sweep_example(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<EncodedExample> {
    let lo = crate::data::N_SPECIAL;
    if config.vocab_size <= lo {
        return Err(Error::invalid("sweep needs at least one non-special token"));
    }
    let mut words = |n: usize| -> Vec<usize> { (0..n).map(|_| rng.gen_range(lo..config.vocab_size)).collect() };
    let utterances = [(Role::Speaker, words(3)), (Role::Listener, words(1)), (Role::Speaker, words(2))];
    let (context, _) = SideSeqs::context(&utterances, config.max_positions)?;
    Ok(EncodedExample {
        context: Some(context),
        response: Some(SideSeqs::response(words(3), config.max_positions)?),
        label: 1 % config.n_labels,
    })
}

/// Checks L1, L2 and `L_cy` in enumerate mode against every model
/// parameter (or every `stride`-th).
pub fn objective_sweep(opts: &SweepOptions) -> Result<Vec<SweepEntry>> {
    let model = DualEmp::new(opts.model.clone(), opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let ex = sweep_example(&opts.model, &mut rng)?;
    let mut store = model.store.clone();
    let mut entries = Vec::new();
    for name in ["L1", "L2", "L_cy"] {
        let loss = |tape: &std::rc::Rc<demp_tensor::Tape>, store: &demp_tensor::ParamStore| {
            let ctx = Ctx::with_tape(tape.clone(), store);
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            let terms = paired_terms(&ctx, &model, &ex, SampleMode::Enumerate, &mut unused).map_err(tensor_error)?;
            match name {
                "L1" => terms.l1(1.0),
                "L2" => terms.l2(1.0),
                _ => terms.l_cy(1.0, 1.0),
            }
            .map_err(tensor_error)
        };
        let r = grad_check_params(&mut store, loss, opts.h, opts.tol, opts.stride)?;
        entries.push(SweepEntry::from_report(name, &r));
    }
    Ok(entries)
}

/// The operation sweep followed by the objective sweep.
pub fn gradient_sweep(opts: &SweepOptions) -> Result<SweepReport> {
    let mut entries = op_sweep(opts.h, opts.tol, opts.seed)?;
    entries.extend(objective_sweep(opts)?);
    Ok(SweepReport::new(entries, opts.tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operation_passes() {
        let entries = op_sweep(1e-5, 1e-5, 3).unwrap();
        for e in &entries {
            assert!(e.passed, "{} {}", e.name, e.max_rel_error);
        }
        assert!(entries.len() > 40);
    }

    #[test]
    fn report_fails_when_any_entry_fails() {
        let ok = SweepEntry {
            name: "a".into(),
            checked: 1,
            max_rel_error: 1e-9,
            passed: true,
        };
        let bad = SweepEntry {
            name: "b".into(),
            checked: 1,
            max_rel_error: 0.3,
            passed: false,
        };
        let r = SweepReport::new(vec![ok.clone(), bad], 1e-4);
        assert!(!r.passed);
        assert_eq!(r.max_rel_error, 0.3);
        assert!(SweepReport::new(vec![ok], 1e-4).passed);
        assert!(r.table().contains("FAIL"));
    }
}
