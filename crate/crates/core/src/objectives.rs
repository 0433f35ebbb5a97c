//! Losses and constraint residuals.
//!
//! Constraint vectors are flattened site-major: for every collocation point,
//! every parameter sample (one if the data has no parameters), every output
//! component, the pair `(value, normal derivative)`. Entry `e` of a block is
//! therefore `(site · n_out + c) · 2 + {0, 1}` with `site = point · n_samples
//! + sample`. A subdomain touching several interfaces concatenates their
//! blocks in ascending interface id. Signs are local minus interface.

use crate::data::Row;
use crate::error::{Error, Result};
use crate::mlp::{MlpNetwork, NormalDirection, Tape};
use crate::optim::ConstrainedProblem;

/// Values and normal derivatives of an interface network at its sites,
/// `site · n_out + c` indexed.
#[derive(Debug, Clone, PartialEq)]
pub struct InterfacePrediction {
    pub interface_id: usize,
    pub n_out: usize,
    pub values: Vec<f64>,
    pub derivs: Vec<f64>,
}

impl InterfacePrediction {
    pub fn n_sites(&self) -> usize {
        self.values.len() / self.n_out.max(1)
    }

    /// Evaluate `net` at every site.
    pub fn evaluate(
        interface_id: usize,
        net: &MlpNetwork,
        sites: &[Vec<f64>],
        normal: &NormalDirection,
    ) -> Result<Self> {
        let n_out = net.output_dim();
        let mut values = Vec::with_capacity(sites.len() * n_out);
        let mut derivs = Vec::with_capacity(sites.len() * n_out);
        check_sites(net, sites, normal)?;
        let mut tape = Tape::new(net.layer_widths());
        for s in sites {
            net.run_tangent(s, normal.spatial(), &mut tape);
            values.extend_from_slice(tape.output());
            derivs.extend_from_slice(tape.output_tangent());
        }
        if values.iter().chain(&derivs).any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(format!(
                "non-finite prediction on interface {interface_id}"
            )));
        }
        Ok(Self {
            interface_id,
            n_out,
            values,
            derivs,
        })
    }
}

fn check_sites(net: &MlpNetwork, sites: &[Vec<f64>], normal: &NormalDirection) -> Result<()> {
    if normal.dim() > net.input_dim() {
        return Err(Error::Shape {
            context: "normal direction",
            expected: net.input_dim(),
            got: normal.dim(),
        });
    }
    if let Some(s) = sites.iter().find(|s| s.len() != net.input_dim()) {
        return Err(Error::Shape {
            context: "constraint site",
            expected: net.input_dim(),
            got: s.len(),
        });
    }
    Ok(())
}

/// Full network inputs for every (point, sample) pair, point-major.
pub fn constraint_sites(points: &[Vec<f64>], samples: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(points.len() * samples.len().max(1));
    for p in points {
        if samples.is_empty() {
            out.push(p.clone());
        }
        for z in samples {
            let mut v = p.clone();
            v.extend_from_slice(z);
            out.push(v);
        }
    }
    out
}

/// All constraints of one interface as seen by one subdomain.
#[derive(Debug, Clone)]
pub struct ConstraintBlock {
    pub interface_id: usize,
    pub sites: Vec<Vec<f64>>,
    pub normal: NormalDirection,
    pub target: InterfacePrediction,
}

impl ConstraintBlock {
    pub fn new(
        sites: Vec<Vec<f64>>,
        normal: NormalDirection,
        target: InterfacePrediction,
    ) -> Result<Self> {
        if target.n_sites() != sites.len() || target.derivs.len() != target.values.len() {
            return Err(Error::InconsistentInterface(format!(
                "interface {} has {} sites but {} predictions",
                target.interface_id,
                sites.len(),
                target.n_sites()
            )));
        }
        Ok(Self {
            interface_id: target.interface_id,
            sites,
            normal,
            target,
        })
    }

    pub fn len(&self) -> usize {
        2 * self.target.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.values.is_empty()
    }
}

/// Every constraint of one subdomain, blocks in ascending interface id.
#[derive(Debug, Clone, Default)]
pub struct ConstraintSet {
    pub blocks: Vec<ConstraintBlock>,
}

impl ConstraintSet {
    pub fn len(&self) -> usize {
        self.blocks.iter().map(ConstraintBlock::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offset of each block in the concatenated vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut at = 0;
        self.blocks
            .iter()
            .map(|b| {
                let o = at;
                at += b.len();
                o
            })
            .collect()
    }

    fn check(&self, net: &MlpNetwork) -> Result<()> {
        for b in &self.blocks {
            check_sites(net, &b.sites, &b.normal)?;
            if b.target.n_out != net.output_dim() {
                return Err(Error::InconsistentInterface(format!(
                    "interface {} predicts {} outputs, network has {}",
                    b.interface_id,
                    b.target.n_out,
                    net.output_dim()
                )));
            }
        }
        Ok(())
    }
}

pub fn mean_abs(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
    }
}

fn check_rows(net: &MlpNetwork, rows: &[Row]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyData);
    }
    for r in rows {
        if r.x.len() + r.zeta.len() != net.input_dim() || r.u.len() != net.output_dim() {
            return Err(Error::Shape {
                context: "local dataset row",
                expected: net.input_dim() + net.output_dim(),
                got: r.x.len() + r.zeta.len() + r.u.len(),
            });
        }
    }
    Ok(())
}

/// `J = mean over rows of ‖û(x, ζ) − u‖²` and its parameter gradient.
pub fn mse_loss(net: &MlpNetwork, rows: &[Row]) -> Result<(f64, Vec<f64>)> {
    check_rows(net, rows)?;
    let mut grad = vec![0.0; net.n_params()];
    let value = mse_accumulate(net, rows, &mut grad);
    Ok((value, grad))
}

fn mse_accumulate(net: &MlpNetwork, rows: &[Row], grad: &mut [f64]) -> f64 {
    let n = rows.len() as f64;
    let mut tape = Tape::new(net.layer_widths());
    let mut input = Vec::with_capacity(net.input_dim());
    let mut seed = vec![0.0; net.output_dim()];
    let mut total = 0.0;
    for r in rows {
        input.clear();
        input.extend_from_slice(&r.x);
        input.extend_from_slice(&r.zeta);
        net.run_forward(&input, &mut tape);
        for ((s, &o), &u) in seed.iter_mut().zip(tape.output()).zip(&r.u) {
            let e = o - u;
            total += e * e;
            *s = 2.0 * e / n;
        }
        net.backprop(&mut tape, &seed, None, grad);
    }
    total / n
}

/// Evaluate `Q` and accumulate `Σ_e weight(e, Q_e) · ∂Q_e/∂θ` into `grad`.
pub fn constraint_pass(
    net: &MlpNetwork,
    set: &ConstraintSet,
    weight: &dyn Fn(usize, f64) -> f64,
    grad: Option<&mut [f64]>,
) -> Result<Vec<f64>> {
    set.check(net)?;
    let n_out = net.output_dim();
    let mut q = Vec::with_capacity(set.len());
    let mut tape = Tape::new(net.layer_widths());
    let mut vs = vec![0.0; n_out];
    let mut ds = vec![0.0; n_out];
    let mut grad = grad;
    for b in &set.blocks {
        for (site, input) in b.sites.iter().enumerate() {
            net.run_tangent(input, b.normal.spatial(), &mut tape);
            let at = site * n_out;
            let mut any = false;
            for c in 0..n_out {
                let qv = tape.output()[c] - b.target.values[at + c];
                let qd = tape.output_tangent()[c] - b.target.derivs[at + c];
                let e = q.len();
                q.push(qv);
                q.push(qd);
                if grad.is_some() {
                    vs[c] = weight(e, qv);
                    ds[c] = weight(e + 1, qd);
                    any |= vs[c] != 0.0 || ds[c] != 0.0;
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                if any {
                    net.backprop(&mut tape, &vs, Some(&ds), g);
                }
            }
        }
    }
    Ok(q)
}

/// `Q_i`: value and normal-derivative mismatches, local minus interface.
pub fn constraint_residual(net: &MlpNetwork, set: &ConstraintSet) -> Result<Vec<f64>> {
    constraint_pass(net, set, &|_, _| 0.0, None)
}

fn check_lambda(lambda: &[f64], set: &ConstraintSet) -> Result<()> {
    if lambda.len() != set.len() {
        return Err(Error::Shape {
            context: "multipliers",
            expected: set.len(),
            got: lambda.len(),
        });
    }
    Ok(())
}

/// `ℒ = J + λᵀQ`, gradient `∇J + J_Qᵀλ`.
pub fn lagrangian(
    net: &MlpNetwork,
    lambda: &[f64],
    rows: &[Row],
    set: &ConstraintSet,
) -> Result<(f64, Vec<f64>)> {
    check_lambda(lambda, set)?;
    let (j, mut grad) = mse_loss(net, rows)?;
    let q = constraint_pass(net, set, &|e, _| lambda[e], Some(&mut grad))?;
    Ok((j + dot(lambda, &q), grad))
}

/// `ℒ = J + λᵀQ + ρ Σ Q_e²`, gradient `∇J + J_Qᵀ(λ + 2ρQ)`.
pub fn augmented_lagrangian(
    net: &MlpNetwork,
    lambda: &[f64],
    rho: f64,
    rows: &[Row],
    set: &ConstraintSet,
) -> Result<(f64, Vec<f64>)> {
    check_lambda(lambda, set)?;
    let (j, mut grad) = mse_loss(net, rows)?;
    let q = constraint_pass(net, set, &|e, qe| lambda[e] + 2.0 * rho * qe, Some(&mut grad))?;
    let sq: f64 = q.iter().map(|v| v * v).sum();
    Ok((j + dot(lambda, &q) + rho * sq, grad))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Targets for fitting one interface network: the frozen neighbours'
/// values and normal derivatives at the interface sites.
#[derive(Debug, Clone)]
pub struct InterfaceFitData {
    pub sites: Vec<Vec<f64>>,
    pub normal: NormalDirection,
    pub neighbours: [InterfacePrediction; 2],
}

impl InterfaceFitData {
    pub fn new(
        interface_id: usize,
        sites: Vec<Vec<f64>>,
        normal: NormalDirection,
        left: &MlpNetwork,
        right: &MlpNetwork,
    ) -> Result<Self> {
        if sites.len() < 2 {
            return Err(Error::InvalidInterface(format!(
                "interface {interface_id} has {} collocation sites, need at least 2",
                sites.len()
            )));
        }
        let l = InterfacePrediction::evaluate(interface_id, left, &sites, &normal)?;
        let r = InterfacePrediction::evaluate(interface_id, right, &sites, &normal)?;
        Ok(Self {
            sites,
            normal,
            neighbours: [l, r],
        })
    }
}

/// `J_ij = Σ_{s ∈ {left, right}} mean_sites ‖û_s − û_ij‖² + mean_sites ‖∂_η û_s − ∂_η û_ij‖²`.
pub fn interface_loss(net: &MlpNetwork, fit: &InterfaceFitData) -> Result<(f64, Vec<f64>)> {
    if fit.sites.len() < 2 {
        return Err(Error::InvalidInterface("fewer than 2 collocation sites".into()));
    }
    check_sites(net, &fit.sites, &fit.normal)?;
    let n_out = net.output_dim();
    if fit.neighbours.iter().any(|p| p.n_out != n_out || p.n_sites() != fit.sites.len()) {
        return Err(Error::InconsistentInterface("neighbour predictions do not match sites".into()));
    }
    let n = fit.sites.len() as f64;
    let mut grad = vec![0.0; net.n_params()];
    let mut tape = Tape::new(net.layer_widths());
    let mut vs = vec![0.0; n_out];
    let mut ds = vec![0.0; n_out];
    let mut total = 0.0;
    for (site, input) in fit.sites.iter().enumerate() {
        net.run_tangent(input, fit.normal.spatial(), &mut tape);
        vs.fill(0.0);
        ds.fill(0.0);
        for c in 0..n_out {
            let (v, d) = (tape.output()[c], tape.output_tangent()[c]);
            for nb in &fit.neighbours {
                let ev = v - nb.values[site * n_out + c];
                let ed = d - nb.derivs[site * n_out + c];
                total += ev * ev + ed * ed;
                vs[c] += 2.0 * ev / n;
                ds[c] += 2.0 * ed / n;
            }
        }
        net.backprop(&mut tape, &vs, Some(&ds), &mut grad);
    }
    Ok((total / n, grad))
}

/// First-order model of `Q` around `θ̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedConstraint {
    pub theta_hat: Vec<f64>,
    pub q_hat: Vec<f64>,
    /// Row-major, `q_hat.len() × theta_hat.len()`.
    pub jacobian: Vec<f64>,
}

impl LinearizedConstraint {
    pub fn n_constraints(&self) -> usize {
        self.q_hat.len()
    }

    /// `Q̄(θ) = Q(θ̂) + J_Q (θ − θ̂)`.
    pub fn evaluate(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.theta_hat.len();
        let delta: Vec<f64> = theta.iter().zip(&self.theta_hat).map(|(a, b)| a - b).collect();
        self.q_hat
            .iter()
            .enumerate()
            .map(|(e, q)| q + dot(&self.jacobian[e * n..(e + 1) * n], &delta))
            .collect()
    }

    /// `J_Qᵀ λ`: the constant gradient shift of the linearized Lagrangian.
    pub fn shift(&self, lambda: &[f64]) -> Vec<f64> {
        let n = self.theta_hat.len();
        let mut out = vec![0.0; n];
        for (e, &l) in lambda.iter().enumerate() {
            if l != 0.0 {
                for (o, j) in out.iter_mut().zip(&self.jacobian[e * n..(e + 1) * n]) {
                    *o += l * j;
                }
            }
        }
        out
    }
}

/// Residual and Jacobian at `theta_hat`, from `grad_params` (value rows)
/// and `mixed_derivative` (derivative rows).
pub fn linearize_constraints(
    net: &MlpNetwork,
    theta_hat: &[f64],
    set: &ConstraintSet,
) -> Result<LinearizedConstraint> {
    if theta_hat.len() != net.n_params() {
        return Err(Error::Shape {
            context: "linearization point",
            expected: net.n_params(),
            got: theta_hat.len(),
        });
    }
    let net = net.with_params_unchecked(theta_hat);
    set.check(&net)?;
    let n_out = net.output_dim();
    let n = net.n_params();
    let mut q_hat = Vec::with_capacity(set.len());
    let mut jacobian = vec![0.0; set.len() * n];
    let mut tape = Tape::new(net.layer_widths());
    let zeros = vec![0.0; n_out];
    let mut seed = vec![0.0; n_out];
    for b in &set.blocks {
        for (site, input) in b.sites.iter().enumerate() {
            net.run_tangent(input, b.normal.spatial(), &mut tape);
            let base = q_hat.len();
            for c in 0..n_out {
                q_hat.push(tape.output()[c] - b.target.values[site * n_out + c]);
                q_hat.push(tape.output_tangent()[c] - b.target.derivs[site * n_out + c]);
            }
            for c in 0..n_out {
                seed.fill(0.0);
                seed[c] = 1.0;
                let ev = base + 2 * c;
                net.backprop(&mut tape, &seed, None, &mut jacobian[ev * n..(ev + 1) * n]);
                net.backprop(&mut tape, &zeros, Some(&seed), &mut jacobian[(ev + 1) * n..(ev + 2) * n]);
            }
        }
    }
    if jacobian.iter().chain(&q_hat).any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite constraint Jacobian".into()));
    }
    Ok(LinearizedConstraint {
        theta_hat: theta_hat.to_vec(),
        q_hat,
        jacobian,
    })
}

/// `ℒ̄ = J + λᵀQ̄`, gradient `∇J + J_Q(θ̂)ᵀλ`.
pub fn linearized_lagrangian(
    net: &MlpNetwork,
    lambda: &[f64],
    rows: &[Row],
    lin: &LinearizedConstraint,
) -> Result<(f64, Vec<f64>)> {
    if lambda.len() != lin.n_constraints() {
        return Err(Error::Shape {
            context: "multipliers",
            expected: lin.n_constraints(),
            got: lambda.len(),
        });
    }
    if lin.theta_hat.len() != net.n_params() {
        return Err(Error::Shape {
            context: "linearization point",
            expected: net.n_params(),
            got: lin.theta_hat.len(),
        });
    }
    let (j, mut grad) = mse_loss(net, rows)?;
    for (g, s) in grad.iter_mut().zip(lin.shift(lambda)) {
        *g += s;
    }
    Ok((j + dot(lambda, &lin.evaluate(net.params())), grad))
}

/// One subdomain's constrained fitting problem with frozen interface
/// predictions.
pub struct SubdomainProblem<'a> {
    pub template: &'a MlpNetwork,
    pub rows: &'a [Row],
    pub constraints: &'a ConstraintSet,
}

impl<'a> SubdomainProblem<'a> {
    pub fn new(
        template: &'a MlpNetwork,
        rows: &'a [Row],
        constraints: &'a ConstraintSet,
    ) -> Result<Self> {
        check_rows(template, rows)?;
        constraints.check(template)?;
        Ok(Self {
            template,
            rows,
            constraints,
        })
    }

    fn net(&self, theta: &[f64]) -> MlpNetwork {
        self.template.with_params_unchecked(theta)
    }
}

impl ConstrainedProblem for SubdomainProblem<'_> {
    fn n_params(&self) -> usize {
        self.template.n_params()
    }

    fn n_constraints(&self) -> usize {
        self.constraints.len()
    }

    fn objective(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let net = self.net(theta);
        let mut grad = vec![0.0; theta.len()];
        let v = mse_accumulate(&net, self.rows, &mut grad);
        Ok((v, grad))
    }

    fn residual(&self, theta: &[f64]) -> Result<Vec<f64>> {
        constraint_pass(&self.net(theta), self.constraints, &|_, _| 0.0, None)
    }

    fn residual_vjp(
        &self,
        theta: &[f64],
        weight: &dyn Fn(usize, f64) -> f64,
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        constraint_pass(&self.net(theta), self.constraints, weight, Some(grad))
    }

    fn jacobian(&self, theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let lin = linearize_constraints(self.template, theta, self.constraints)?;
        Ok((lin.q_hat, lin.jacobian))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Activation;

    fn rel_dev(a: f64, b: f64) -> f64 {
        (a - b).abs() / (1.0 + a.abs().max(b.abs()))
    }

    /// Central differences of a scalar function of θ.
    fn fd_grad(theta: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let mut t = theta.to_vec();
        (0..theta.len())
            .map(|k| {
                let orig = t[k];
                t[k] = orig + h;
                let fp = f(&t);
                t[k] = orig - h;
                let fm = f(&t);
                t[k] = orig;
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| rel_dev(*x, *y)).fold(0.0, f64::max)
    }

    fn small_net(seed: u64) -> MlpNetwork {
        MlpNetwork::new(vec![2, 6, 5, 1], Activation::Swish, seed).unwrap()
    }

    fn rows(n: usize) -> Vec<Row> {
        (0..n)
            .map(|i| {
                let x = -1.0 + 2.0 * i as f64 / (n - 1) as f64;
                Row { x: vec![x, 0.3 * x], zeta: vec![], u: vec![(2.0 * x).sin()] }
            })
            .collect()
    }

    fn random_set(net: &MlpNetwork, seed: u64) -> ConstraintSet {
        let pts: Vec<Vec<f64>> = (0..4).map(|i| vec![-0.9 + 0.6 * i as f64, 0.2]).collect();
        let sites = constraint_sites(&pts, &[]);
        let normal = NormalDirection::axis(2, 1).unwrap();
        let other = small_net(seed + 100);
        let target = InterfacePrediction::evaluate(3, &other, &sites, &normal).unwrap();
        let _ = net;
        ConstraintSet { blocks: vec![ConstraintBlock::new(sites, normal, target).unwrap()] }
    }

    #[test]
    fn mse_exact_fit_is_zero() {
        let net = small_net(1);
        let data: Vec<Row> = rows(5)
            .into_iter()
            .map(|mut r| {
                r.u = net.forward(&r.x).unwrap();
                r
            })
            .collect();
        let (j, g) = mse_loss(&net, &data).unwrap();
        assert_eq!(j, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mse_single_row() {
        let net = MlpNetwork::from_params(vec![1, 1], Activation::Swish, vec![0.0, 0.5], 0).unwrap();
        let data = [Row { x: vec![0.3], zeta: vec![], u: vec![0.0] }];
        assert_eq!(mse_loss(&net, &data).unwrap().0, 0.25);
        assert!(matches!(mse_loss(&net, &[]), Err(Error::EmptyData)));
    }

    #[test]
    fn mse_gradient_matches_fd() {
        let net = small_net(2);
        let data = rows(9);
        let (_, g) = mse_loss(&net, &data).unwrap();
        let fd = fd_grad(net.params(), 1e-6, |t| mse_loss(&net.with_params_unchecked(t), &data).unwrap().0);
        assert!(max_rel(&g, &fd) < 1e-5);
    }

    #[test]
    fn residual_hand_example() {
        // u = x1, interface constant 0, normal e1, point x1 = 0.5.
        let net = MlpNetwork::from_params(vec![2, 1], Activation::Swish, vec![1.0, 0.0, 0.0], 0).unwrap();
        let normal = NormalDirection::axis(2, 0).unwrap();
        let target = InterfacePrediction { interface_id: 0, n_out: 1, values: vec![0.0], derivs: vec![0.0] };
        let set = ConstraintSet {
            blocks: vec![ConstraintBlock::new(vec![vec![0.5, 0.0]], normal, target).unwrap()],
        };
        assert_eq!(constraint_residual(&net, &set).unwrap(), vec![0.5, 1.0]);
    }

    #[test]
    fn residual_zero_when_matching_and_antisymmetric() {
        let net = small_net(3);
        let other = small_net(4);
        let pts = vec![vec![0.1, 0.0], vec![0.4, 0.0], vec![0.9, 0.0]];
        let normal = NormalDirection::axis(2, 1).unwrap();
        let mk = |target: &MlpNetwork| ConstraintSet {
            blocks: vec![ConstraintBlock::new(
                pts.clone(),
                normal.clone(),
                InterfacePrediction::evaluate(0, target, &pts, &normal).unwrap(),
            )
            .unwrap()],
        };
        assert!(constraint_residual(&net, &mk(&net)).unwrap().iter().all(|v| *v == 0.0));
        let q1 = constraint_residual(&net, &mk(&other)).unwrap();
        let q2 = constraint_residual(&other, &mk(&net)).unwrap();
        for (a, b) in q1.iter().zip(&q2) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn residual_order_follows_site_order() {
        let net = small_net(5);
        let set = random_set(&net, 5);
        let q = constraint_residual(&net, &set).unwrap();
        let mut rev = set.clone();
        let b = &mut rev.blocks[0];
        b.sites.reverse();
        let n = b.target.n_sites();
        let perm = |v: &Vec<f64>| (0..n).rev().map(|i| v[i]).collect::<Vec<_>>();
        b.target.values = perm(&b.target.values);
        b.target.derivs = perm(&b.target.derivs);
        let qr = constraint_residual(&net, &rev).unwrap();
        for s in 0..n {
            assert_eq!(q[2 * s], qr[2 * (n - 1 - s)]);
            assert_eq!(q[2 * s + 1], qr[2 * (n - 1 - s) + 1]);
        }
    }

    #[test]
    fn missing_prediction_is_inconsistent() {
        let normal = NormalDirection::axis(2, 1).unwrap();
        let target = InterfacePrediction { interface_id: 0, n_out: 1, values: vec![0.0], derivs: vec![0.0] };
        assert!(matches!(
            ConstraintBlock::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]], normal, target),
            Err(Error::InconsistentInterface(_))
        ));
    }

    #[test]
    fn lagrangian_cases() {
        let net = small_net(6);
        let data = rows(7);
        let set = random_set(&net, 6);
        let (j, gj) = mse_loss(&net, &data).unwrap();
        let zero = vec![0.0; set.len()];
        let (l, gl) = lagrangian(&net, &zero, &data, &set).unwrap();
        assert_eq!(l, j);
        assert_eq!(gl, gj);
        assert!(lagrangian(&net, &[1.0], &data, &set).is_err());

        let lam: Vec<f64> = (0..set.len()).map(|i| 0.1 * i as f64 - 0.3).collect();
        let (_, g) = lagrangian(&net, &lam, &data, &set).unwrap();
        let fd = fd_grad(net.params(), 1e-6, |t| {
            lagrangian(&net.with_params_unchecked(t), &lam, &data, &set).unwrap().0
        });
        assert!(max_rel(&g, &fd) < 1e-5);
    }

    #[test]
    fn lagrangian_direct_formula() {
        // J = 0.25, two constraints Q = [1, 2] from a [1,1] net with u = 0.5.
        let net = MlpNetwork::from_params(vec![1, 1], Activation::Swish, vec![0.0, 0.5], 0).unwrap();
        let data = [Row { x: vec![0.0], zeta: vec![], u: vec![0.0] }];
        let normal = NormalDirection::axis(1, 0).unwrap();
        let target = InterfacePrediction { interface_id: 0, n_out: 1, values: vec![-0.5], derivs: vec![-2.0] };
        let set = ConstraintSet {
            blocks: vec![ConstraintBlock::new(vec![vec![0.0]], normal, target).unwrap()],
        };
        assert_eq!(constraint_residual(&net, &set).unwrap(), vec![1.0, 2.0]);
        let (l, _) = lagrangian(&net, &[0.1, -0.2], &data, &set).unwrap();
        assert!((l - (-0.05)).abs() < 1e-15);
        let (a, _) = augmented_lagrangian(&net, &[0.0, 0.0], 1.0, &data, &set).unwrap();
        assert!((a - 5.25).abs() < 1e-15);
    }

    #[test]
    fn augmented_gradient_matches_fd_and_reduces() {
        let net = small_net(7);
        let data = rows(7);
        let set = random_set(&net, 7);
        let lam: Vec<f64> = (0..set.len()).map(|i| 0.05 * i as f64).collect();
        let (_, g) = augmented_lagrangian(&net, &lam, 0.7, &data, &set).unwrap();
        let fd = fd_grad(net.params(), 1e-6, |t| {
            augmented_lagrangian(&net.with_params_unchecked(t), &lam, 0.7, &data, &set).unwrap().0
        });
        assert!(max_rel(&g, &fd) < 1e-5);

        // Q = 0 by construction: both forms equal J.
        let matched = ConstraintSet {
            blocks: vec![ConstraintBlock::new(
                set.blocks[0].sites.clone(),
                set.blocks[0].normal.clone(),
                InterfacePrediction::evaluate(0, &net, &set.blocks[0].sites, &set.blocks[0].normal).unwrap(),
            )
            .unwrap()],
        };
        let j = mse_loss(&net, &data).unwrap().0;
        assert_eq!(augmented_lagrangian(&net, &lam, 0.7, &data, &matched).unwrap().0, j);
        assert_eq!(lagrangian(&net, &lam, &data, &matched).unwrap().0, j);
    }

    fn constant_net(dim: usize, c: f64) -> MlpNetwork {
        let widths = vec![dim, 3, 1];
        let mut p = vec![0.0; crate::mlp::param_count(&widths)];
        *p.last_mut().unwrap() = c;
        MlpNetwork::from_params(widths, Activation::Swish, p, 0).unwrap()
    }

    #[test]
    fn interface_loss_cases() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 9.0, 0.5]).collect();
        let normal = NormalDirection::axis(2, 1).unwrap();
        let one = constant_net(2, 1.0);
        let fit = InterfaceFitData::new(0, pts.clone(), normal.clone(), &one, &one).unwrap();
        assert_eq!(interface_loss(&constant_net(2, 0.0), &fit).unwrap().0, 2.0);
        assert_eq!(interface_loss(&one, &fit).unwrap().0, 0.0);

        let (a, b) = (small_net(8), small_net(9));
        let fit = InterfaceFitData::new(0, pts.clone(), normal.clone(), &a, &b).unwrap();
        let net = small_net(10);
        let (_, g) = interface_loss(&net, &fit).unwrap();
        let fd = fd_grad(net.params(), 1e-6, |t| interface_loss(&net.with_params_unchecked(t), &fit).unwrap().0);
        assert!(max_rel(&g, &fd) < 1e-5);

        assert!(matches!(
            InterfaceFitData::new(0, pts[..1].to_vec(), normal, &a, &b),
            Err(Error::InvalidInterface(_))
        ));
    }

    #[test]
    fn linearization_is_exact_at_reference_and_for_affine_nets() {
        let net = small_net(11);
        let set = random_set(&net, 11);
        let lin = linearize_constraints(&net, net.params(), &set).unwrap();
        assert_eq!(lin.evaluate(net.params()), constraint_residual(&net, &set).unwrap());

        let affine = MlpNetwork::new(vec![2, 1], Activation::Swish, 3).unwrap();
        let set = random_set(&affine, 12);
        let lin = linearize_constraints(&affine, affine.params(), &set).unwrap();
        let moved: Vec<f64> = affine.params().iter().map(|p| p + 0.37).collect();
        let exact = constraint_residual(&affine.with_params_unchecked(&moved), &set).unwrap();
        for (a, b) in lin.evaluate(&moved).iter().zip(&exact) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn linearization_error_is_second_order() {
        let net = small_net(13);
        let set = random_set(&net, 13);
        let lin = linearize_constraints(&net, net.params(), &set).unwrap();
        let dir: Vec<f64> = (0..net.n_params()).map(|k| ((k * 7) % 5) as f64 / 5.0 - 0.4).collect();
        let gap = |s: f64| {
            let t: Vec<f64> = net.params().iter().zip(&dir).map(|(p, d)| p + s * d).collect();
            let exact = constraint_residual(&net.with_params_unchecked(&t), &set).unwrap();
            lin.evaluate(&t).iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let ratio = gap(1e-2) / gap(5e-3);
        assert!((ratio - 4.0).abs() < 0.4, "{ratio}");
    }

    #[test]
    fn jacobian_rows_match_derivative_routines() {
        let net = small_net(14);
        let set = random_set(&net, 14);
        let lin = linearize_constraints(&net, net.params(), &set).unwrap();
        let n = net.n_params();
        let b = &set.blocks[0];
        for (s, x) in b.sites.iter().enumerate() {
            let gv = net.grad_params(x).unwrap();
            let gd = net.mixed_derivative(x, &b.normal).unwrap();
            assert_eq!(&lin.jacobian[(2 * s) * n..(2 * s + 1) * n], gv[0].as_slice());
            assert_eq!(&lin.jacobian[(2 * s + 1) * n..(2 * s + 2) * n], gd[0].as_slice());
        }
    }

    #[test]
    fn linearized_lagrangian_cases() {
        let net = small_net(15);
        let data = rows(6);
        let set = random_set(&net, 15);
        let lin = linearize_constraints(&net, net.params(), &set).unwrap();
        let zero = vec![0.0; set.len()];
        assert_eq!(linearized_lagrangian(&net, &zero, &data, &lin).unwrap(), mse_loss(&net, &data).unwrap());
        let lam: Vec<f64> = (0..set.len()).map(|i| 0.2 - 0.1 * i as f64).collect();
        let (lv, _) = linearized_lagrangian(&net, &lam, &data, &lin).unwrap();
        let (ev, _) = lagrangian(&net, &lam, &data, &set).unwrap();
        assert!((lv - ev).abs() < 1e-14);

        let moved: Vec<f64> = net.params().iter().map(|p| p + 0.05).collect();
        let mnet = net.with_params_unchecked(&moved);
        let (_, g) = linearized_lagrangian(&mnet, &lam, &data, &lin).unwrap();
        let fd = fd_grad(&moved, 1e-6, |t| {
            linearized_lagrangian(&net.with_params_unchecked(t), &lam, &data, &lin).unwrap().0
        });
        assert!(max_rel(&g, &fd) < 1e-5);
    }

    #[test]
    fn subdomain_problem_matches_free_functions() {
        let net = small_net(16);
        let data = rows(6);
        let set = random_set(&net, 16);
        let p = SubdomainProblem::new(&net, &data, &set).unwrap();
        assert_eq!(p.objective(net.params()).unwrap(), mse_loss(&net, &data).unwrap());
        assert_eq!(p.residual(net.params()).unwrap(), constraint_residual(&net, &set).unwrap());
        let lam: Vec<f64> = (0..set.len()).map(|i| 0.3 * i as f64).collect();
        let (_, mut g) = p.objective(net.params()).unwrap();
        p.residual_vjp(net.params(), &|e, _| lam[e], &mut g).unwrap();
        assert_eq!(g, lagrangian(&net, &lam, &data, &set).unwrap().1);
    }

    #[test]
    fn parametric_sites_are_point_major() {
        let pts = vec![vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]];
        let samples = vec![vec![5.0, 6.0], vec![7.0, 8.0], vec![9.0, 1.0]];
        let s = constraint_sites(&pts, &samples);
        assert_eq!(s.len(), 6);
        assert_eq!(s[1], vec![0.0, 0.0, 0.0, 7.0, 8.0]);
        assert_eq!(s[3], vec![1.0, 0.0, 0.0, 5.0, 6.0]);
    }
}
